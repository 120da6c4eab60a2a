//! Training-loop drivers: corpus builders over the synthetic world's records
//! and fixed-step loops for the generator, the filter, and pre-training.
//!
//! Batches are drawn by index from a pool using a per-`(role, step)` RNG
//! stream, and masking uses a separate per-step stream, so a loop's entire
//! trajectory is a function of `(initial weights, pool, config, seed)` —
//! rerunning it reproduces the same checkpoints.

use std::collections::BTreeMap;

use rand::Rng;

use crate::filter::{train_filter_step, FilterStepReport, FilterTrainItem};
use crate::generator::{train_generator_step, GenTrainItem, StepReport, TrainError};
use crate::model::Model;
use crate::objectives::TaskId;
use crate::pipeline::config::{PretrainConfig, TrainConfig};
use crate::rng::{domain, stream_rng};
use crate::tensor::{AdamW, OptimConfig, Tensor};
use crate::vocab::{BoundingBox, QuestionType, Vocab};

use super::microworld::{oracle_qas, SceneRecord};
use super::pretrain::{
    pretrain_step_shared, pretrain_step_two_pass, PretrainError, PretrainItem, PretrainReport,
};
use super::records::{DcRecord, ImageRecord};
use crate::filter::QaCandidate;

/// Stream tags separating the consumers of the data-order domain.
const ROLE_GENERATOR: u64 = 1;
const ROLE_FILTER: u64 = 2;
const ROLE_PRETRAIN_P1: u64 = 3;
const ROLE_PRETRAIN_P2: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainLoopError {
    #[error("the training pool is empty")]
    NoItems,
    #[error("image {0} appears in the scene set but not the image set")]
    MissingImage(u64),
    #[error("image record {0} failed to decode: {1}")]
    BadImage(u64, String),
    #[error(transparent)]
    Step(#[from] TrainError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
}

/// One generator training example, referencing its image by pool index.
#[derive(Debug, Clone)]
pub struct GenItemSpec {
    pub image_idx: usize,
    pub bbox: BoundingBox,
    pub caption_ids: Vec<u32>,
    pub qtype: QuestionType,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

/// One filter training example (box-free QA).
#[derive(Debug, Clone)]
pub struct QaItemSpec {
    pub image_idx: usize,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

/// Decodes image records into tensors once, in input order.
pub fn decode_images(records: &[ImageRecord]) -> Result<Vec<Tensor>, TrainLoopError> {
    records
        .iter()
        .map(|r| r.to_tensor().map_err(|e| TrainLoopError::BadImage(r.id, e.to_string())))
        .collect()
}

fn image_index(records: &[ImageRecord]) -> BTreeMap<u64, usize> {
    records.iter().enumerate().map(|(i, r)| (r.id, i)).collect()
}

/// Expands scenes into the generator's training triples: every templated QA
/// pair becomes one (region, caption, qtype, question, answer) item.
pub fn generator_items(
    vocab: &Vocab,
    images: &[ImageRecord],
    scenes: &[SceneRecord],
) -> Result<Vec<GenItemSpec>, TrainLoopError> {
    let index = image_index(images);
    let mut out = Vec::new();
    for scene in scenes {
        let &image_idx =
            index.get(&scene.id).ok_or(TrainLoopError::MissingImage(scene.id))?;
        for qa in oracle_qas(scene) {
            out.push(GenItemSpec {
                image_idx,
                bbox: qa.region,
                caption_ids: vocab.encode(&qa.caption),
                qtype: qa.qtype,
                question_ids: vocab.encode(&qa.question),
                answer_ids: vocab.encode(&qa.answer),
            });
        }
    }
    Ok(out)
}

/// Expands scenes into the filter's training pairs (question, answer),
/// box-free: the filter never sees regions.
pub fn filter_items(
    vocab: &Vocab,
    images: &[ImageRecord],
    scenes: &[SceneRecord],
) -> Result<Vec<QaItemSpec>, TrainLoopError> {
    let index = image_index(images);
    let mut out = Vec::new();
    for scene in scenes {
        let &image_idx =
            index.get(&scene.id).ok_or(TrainLoopError::MissingImage(scene.id))?;
        for qa in oracle_qas(scene) {
            out.push(QaItemSpec {
                image_idx,
                question_ids: vocab.encode(&qa.question),
                answer_ids: vocab.encode(&qa.answer),
            });
        }
    }
    Ok(out)
}

fn optimizer(cfg_lr: f64, weight_decay: f64, warmup: u64, steps: u64) -> AdamW {
    AdamW::new(OptimConfig {
        lr: cfg_lr,
        weight_decay,
        warmup_steps: warmup,
        decay_steps: steps.saturating_sub(warmup),
        ..OptimConfig::default()
    })
}

fn draw<'a, T>(pool: &'a [T], n: usize, rng: &mut impl Rng) -> Vec<&'a T> {
    (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
}

/// Runs `cfg.steps` generator steps. `on_step` sees every step's report
/// (use it for logging or history).
pub fn train_generator_loop(
    model: &mut Model,
    vocab: &Vocab,
    images: &[Tensor],
    pool: &[GenItemSpec],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<(), TrainLoopError> {
    if pool.is_empty() {
        return Err(TrainLoopError::NoItems);
    }
    let mut opt = optimizer(cfg.lr, cfg.weight_decay, cfg.warmup_steps, cfg.steps);
    for step in 0..cfg.steps {
        let mut order = stream_rng(&[domain::DATA_ORDER, seed, ROLE_GENERATOR, step]);
        let batch: Vec<GenTrainItem> = draw(pool, cfg.batch_size, &mut order)
            .into_iter()
            .map(|it| GenTrainItem {
                image: images[it.image_idx].clone(),
                bbox: it.bbox,
                caption_ids: it.caption_ids.clone(),
                qtype: it.qtype,
                question_ids: it.question_ids.clone(),
                answer_ids: it.answer_ids.clone(),
            })
            .collect();
        let mut mask = stream_rng(&[domain::TRAIN_MASK, seed, ROLE_GENERATOR, step]);
        let report = train_generator_step(
            model,
            vocab,
            &mut opt,
            &batch,
            cfg.caption_mask_p,
            cfg.question_mask_p,
            &mut mask,
        )?;
        on_step(step, &report);
    }
    Ok(())
}

/// Runs `cfg.steps` filter steps (QA objective only).
pub fn train_filter_loop(
    model: &mut Model,
    vocab: &Vocab,
    images: &[Tensor],
    pool: &[QaItemSpec],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, &FilterStepReport),
) -> Result<(), TrainLoopError> {
    if pool.is_empty() {
        return Err(TrainLoopError::NoItems);
    }
    let mut opt = optimizer(cfg.lr, cfg.weight_decay, cfg.warmup_steps, cfg.steps);
    for step in 0..cfg.steps {
        let mut order = stream_rng(&[domain::DATA_ORDER, seed, ROLE_FILTER, step]);
        let batch: Vec<FilterTrainItem> = draw(pool, cfg.batch_size, &mut order)
            .into_iter()
            .map(|it| FilterTrainItem {
                image: images[it.image_idx].clone(),
                question_ids: it.question_ids.clone(),
                answer_ids: it.answer_ids.clone(),
            })
            .collect();
        let mut mask = stream_rng(&[domain::TRAIN_MASK, seed, ROLE_FILTER, step]);
        let report = train_filter_step(model, vocab, &mut opt, &batch, &mut mask)?;
        on_step(step, &report);
    }
    Ok(())
}

/// Builds the pre-training pool: one item per image, its alt-text caption,
/// plus (when available) the first kept QA pair and the first non-empty dense
/// caption bootstrapped for it.
pub fn pretrain_items(
    vocab: &Vocab,
    images: &[ImageRecord],
    tensors: &[Tensor],
    captions: &[DcRecord],
    candidates: &[QaCandidate],
) -> Vec<PretrainItem> {
    let index = image_index(images);
    let mut dc_of: BTreeMap<u64, (BoundingBox, Vec<u32>)> = BTreeMap::new();
    for r in captions {
        if !r.token_ids.is_empty() && index.contains_key(&r.image_id) {
            dc_of.entry(r.image_id).or_insert_with(|| (r.bbox, r.token_ids.clone()));
        }
    }
    let mut qa_of: BTreeMap<u64, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
    for c in candidates {
        if c.kept == Some(true) && index.contains_key(&c.image_id) {
            qa_of.entry(c.image_id).or_insert_with(|| {
                (
                    vocab.encode(c.question.as_deref().expect("kept implies parsed")),
                    vocab.encode(c.generator_answer.as_deref().expect("kept implies parsed")),
                )
            });
        }
    }
    images
        .iter()
        .zip(tensors)
        .map(|(rec, tensor)| PretrainItem {
            image: tensor.clone(),
            caption_ids: vocab.encode(&rec.caption),
            qa: qa_of.get(&rec.id).cloned(),
            dc: dc_of.get(&rec.id).cloned(),
        })
        .collect()
}

/// Runs `cfg.steps` pre-training steps in shared or two-pass mode and returns
/// the full per-step loss history (for logging and moving averages).
pub fn pretrain_loop(
    model: &mut Model,
    vocab: &Vocab,
    pool: &[PretrainItem],
    cfg: &PretrainConfig,
    tasks: &std::collections::BTreeSet<TaskId>,
    seed: u64,
    mut on_step: impl FnMut(u64, &PretrainReport),
) -> Result<Vec<(u64, Vec<(TaskId, f64)>)>, TrainLoopError> {
    if pool.is_empty() {
        return Err(TrainLoopError::NoItems);
    }
    let mut opt = optimizer(cfg.lr, cfg.weight_decay, cfg.warmup_steps, cfg.steps);
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let step_seed = crate::rng::stream_seed(&[domain::TRAIN_MASK, seed, step]);
        let mut o1 = stream_rng(&[domain::DATA_ORDER, seed, ROLE_PRETRAIN_P1, step]);
        let batch1: Vec<PretrainItem> =
            draw(pool, cfg.batch_size, &mut o1).into_iter().cloned().collect();
        let report = if cfg.two_pass {
            let mut o2 = stream_rng(&[domain::DATA_ORDER, seed, ROLE_PRETRAIN_P2, step]);
            let batch2: Vec<PretrainItem> =
                draw(pool, cfg.batch_size, &mut o2).into_iter().cloned().collect();
            pretrain_step_two_pass(
                model, vocab, &mut opt, &batch1, &batch2, tasks, cfg.mask_p, step_seed,
            )?
        } else {
            pretrain_step_shared(model, vocab, &mut opt, &batch1, tasks, cfg.mask_p, step_seed)?
        };
        history.push((step, report.per_task.clone()));
        on_step(step, &report);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::microworld::{oracle_corpus, synthesize_microworld, MicroWorldSpec};
    use crate::pipeline::pretrain::{PASS1_TASKS, PASS2_TASKS};

    fn world() -> (Vocab, Vec<ImageRecord>, Vec<SceneRecord>) {
        let corpus = oracle_corpus();
        let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();
        let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
        let (images, scenes) = synthesize_microworld(&spec, 4, 51).unwrap().into_iter().unzip();
        (vocab, images, scenes)
    }

    fn model(vocab: &Vocab, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                image_size: 32,
                patch_size: 8,
                channels: 24,
                vision_layers: 1,
                text_layers: 1,
                heads: 2,
                max_seq: 48,
                vocab_size: vocab.len(),
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn corpora_cover_every_oracle_pair_and_reject_missing_images() {
        let (vocab, images, scenes) = world();
        let expect: usize = scenes.iter().map(|s| oracle_qas(s).len()).sum();
        let gen = generator_items(&vocab, &images, &scenes).unwrap();
        let qa = filter_items(&vocab, &images, &scenes).unwrap();
        assert_eq!(gen.len(), expect);
        assert_eq!(qa.len(), expect);
        assert!(gen.iter().all(|g| !g.question_ids.is_empty() && !g.answer_ids.is_empty()));
        let err = generator_items(&vocab, &images[..1], &scenes).unwrap_err();
        assert!(matches!(err, TrainLoopError::MissingImage(_)));
    }

    #[test]
    fn training_loops_are_deterministic_and_reduce_loss() {
        let (vocab, images, scenes) = world();
        let tensors = decode_images(&images).unwrap();
        let pool = generator_items(&vocab, &images, &scenes).unwrap();
        let cfg = TrainConfig { steps: 12, batch_size: 4, lr: 3e-3, ..TrainConfig::default() };

        let run = |seed: u64| {
            let mut m = model(&vocab, 2);
            let mut hist = Vec::new();
            train_generator_loop(&mut m, &vocab, &tensors, &pool, &cfg, seed, |_, r| {
                hist.push(r.gen)
            })
            .unwrap();
            (m, hist)
        };
        let (m1, h1) = run(9);
        let (m2, h2) = run(9);
        assert_eq!(h1, h2, "same seed, same loss trajectory");
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.value(), b.value());
        }
        let (_, h3) = run(10);
        assert_ne!(h1, h3, "different seed, different trajectory");
        assert!(h1.last().unwrap() < h1.first().unwrap(), "loss should drop: {h1:?}");
    }

    #[test]
    fn filter_loop_trains_and_pretrain_history_has_all_tasks() {
        let (vocab, images, scenes) = world();
        let tensors = decode_images(&images).unwrap();
        let qa_pool = filter_items(&vocab, &images, &scenes).unwrap();
        let cfg = TrainConfig { steps: 10, batch_size: 4, lr: 3e-3, ..TrainConfig::default() };
        let mut m = model(&vocab, 3);
        let mut losses = Vec::new();
        train_filter_loop(&mut m, &vocab, &tensors, &qa_pool, &cfg, 1, |_, r| {
            losses.push(r.loss)
        })
        .unwrap();
        assert_eq!(losses.len(), 10);
        assert!(losses.last().unwrap() < losses.first().unwrap());

        // pre-training pool without bootstrapped records still runs pass 1
        let items = pretrain_items(&vocab, &images, &tensors, &[], &[]);
        assert!(items.iter().all(|i| i.qa.is_none() && i.dc.is_none()));
        let pcfg = PretrainConfig { steps: 3, batch_size: 3, ..PretrainConfig::default() };
        let tasks = PASS1_TASKS.iter().chain(&PASS2_TASKS).copied().collect();
        let mut m = model(&vocab, 4);
        let hist = pretrain_loop(&mut m, &vocab, &items, &pcfg, &tasks, 5, |_, _| {}).unwrap();
        assert_eq!(hist.len(), 3);
        let names: Vec<&str> = hist[0].1.iter().map(|(t, _)| t.name()).collect();
        assert!(names.contains(&"itc") && names.contains(&"imlm"));
        assert!(!names.contains(&"vqa"), "no QA data, no QA loss");
    }
}
