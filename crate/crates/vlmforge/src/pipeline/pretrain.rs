//! Multi-task pre-training over an expanded dataset.
//!
//! Six objectives share one backbone: contrastive alignment, image-text
//! matching, causal captioning, bidirectional captioning, question answering,
//! and region captioning. The first four see plain image-caption pairs
//! ("understanding" pass); the last two consume the bootstrapped QA pairs and
//! dense captions ("generation" pass). A step can run both passes over one
//! batch (shared mode) or each pass over its own batch (two-pass mode); both
//! merge every task loss into a single sum and take one optimizer step, so
//! the update is the gradient of the same scalar either way.
//!
//! Masking randomness is keyed by `(step seed, task, item index)` — never by
//! call order — so a task's mask pattern for an item is identical in shared
//! and two-pass mode, and identical across reruns.

use std::collections::BTreeSet;

use crate::model::Model;
use crate::objectives::{
    loss_dc_with_vision, loss_ic, loss_imlm, loss_itc, loss_itm, loss_vqa, LossBreakdown,
    ObjectiveError, TaskId,
};
use crate::rng::{domain, stream_rng};
use crate::tensor::{AdamW, Tensor};
use crate::vocab::{BoundingBox, Vocab};

/// One pre-training example. `caption_ids` is the image-level caption used by
/// the understanding tasks; `qa` and `dc` carry the bootstrapped records for
/// the generation tasks (items without them simply sit out those losses).
/// Cloning is cheap: the image tensor is shared, not copied.
#[derive(Clone)]
pub struct PretrainItem {
    pub image: Tensor,
    pub caption_ids: Vec<u32>,
    /// `(question_ids, answer_ids)`.
    pub qa: Option<(Vec<u32>, Vec<u32>)>,
    /// `(region, caption_ids)`.
    pub dc: Option<(BoundingBox, Vec<u32>)>,
}

/// Tasks handled by the understanding pass.
pub const PASS1_TASKS: [TaskId; 4] = [TaskId::Itc, TaskId::Itm, TaskId::Ic, TaskId::Imlm];
/// Tasks handled by the generation pass.
pub const PASS2_TASKS: [TaskId; 2] = [TaskId::Vqa, TaskId::Dc];

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("a pre-training step needs at least one enabled task with usable items")]
    EmptyStep,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Stable stream tag for a task (its position in [`TaskId::ALL`]).
fn task_code(task: TaskId) -> u64 {
    TaskId::ALL.iter().position(|t| *t == task).unwrap() as u64
}

fn mask_rng(step_seed: u64, task: TaskId, item_idx: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(&[domain::TRAIN_MASK, step_seed, task_code(task), item_idx as u64])
}

fn mean_of(parts: Vec<Tensor>) -> Option<Tensor> {
    if parts.is_empty() {
        return None;
    }
    let inv = 1.0 / parts.len() as f64;
    let mut acc: Option<Tensor> = None;
    for p in parts {
        acc = Some(match acc {
            Some(a) => a.add(&p),
            None => p,
        });
    }
    Some(acc.unwrap().scale(inv))
}

/// Understanding-pass losses (ITC, ITM, IC, IMLM) over a batch. Each item's
/// image is encoded once (box-free) and shared by all four tasks. The two
/// batch-level tasks (ITC, ITM) need at least two items and are skipped —
/// not failed — on smaller batches.
pub fn pretrain_losses_pass1(
    model: &Model,
    vocab: &Vocab,
    batch: &[PretrainItem],
    tasks: &BTreeSet<TaskId>,
    mask_p: f64,
    step_seed: u64,
) -> Result<LossBreakdown, PretrainError> {
    let mut lb = LossBreakdown::new();
    if batch.is_empty() || !PASS1_TASKS.iter().any(|t| tasks.contains(t)) {
        return Ok(lb);
    }
    let visions: Vec<_> = batch.iter().map(|it| model.encode_image(&it.image, None)).collect();

    if tasks.contains(&TaskId::Itc) && batch.len() >= 2 {
        let img_embs: Vec<Tensor> =
            visions.iter().map(|v| model.image_global_embedding(v)).collect();
        let txt_embs: Vec<Tensor> =
            batch.iter().map(|it| model.text_global_embedding(&it.caption_ids)).collect();
        lb.set(TaskId::Itc, loss_itc(&img_embs, &txt_embs, &model.log_temp())?);
    }
    if tasks.contains(&TaskId::Itm) && batch.len() >= 2 {
        let texts: Vec<&[u32]> = batch.iter().map(|it| it.caption_ids.as_slice()).collect();
        let vis: Vec<_> = visions.iter().collect();
        lb.set(TaskId::Itm, loss_itm(model, &texts, &vis)?);
    }
    if tasks.contains(&TaskId::Ic) {
        let mut parts = Vec::new();
        for (idx, (item, vision)) in batch.iter().zip(&visions).enumerate() {
            let mut rng = mask_rng(step_seed, TaskId::Ic, idx);
            parts.push(loss_ic(model, vocab, vision, &item.caption_ids, mask_p, &mut rng)?);
        }
        if let Some(mean) = mean_of(parts) {
            lb.set(TaskId::Ic, mean);
        }
    }
    if tasks.contains(&TaskId::Imlm) {
        let mut parts = Vec::new();
        for (idx, (item, vision)) in batch.iter().zip(&visions).enumerate() {
            let mut rng = mask_rng(step_seed, TaskId::Imlm, idx);
            parts.push(loss_imlm(model, vocab, vision, &item.caption_ids, mask_p, &mut rng)?);
        }
        if let Some(mean) = mean_of(parts) {
            lb.set(TaskId::Imlm, mean);
        }
    }
    Ok(lb)
}

/// Generation-pass losses (VQA, DC) over a batch. VQA re-answers in the
/// box-free context; DC encodes the item's image with its region box.
pub fn pretrain_losses_pass2(
    model: &Model,
    vocab: &Vocab,
    batch: &[PretrainItem],
    tasks: &BTreeSet<TaskId>,
    mask_p: f64,
    step_seed: u64,
) -> Result<LossBreakdown, PretrainError> {
    let mut lb = LossBreakdown::new();
    if tasks.contains(&TaskId::Vqa) {
        let mut parts = Vec::new();
        for item in batch {
            if let Some((q, a)) = &item.qa {
                let vision = model.encode_image(&item.image, None);
                parts.push(loss_vqa(model, vocab, &vision, q, a)?);
            }
        }
        if let Some(mean) = mean_of(parts) {
            lb.set(TaskId::Vqa, mean);
        }
    }
    if tasks.contains(&TaskId::Dc) {
        let mut parts = Vec::new();
        for (idx, item) in batch.iter().enumerate() {
            if let Some((bbox, caption_ids)) = &item.dc {
                let vision = model.encode_image(&item.image, Some(bbox));
                let mut rng = mask_rng(step_seed, TaskId::Dc, idx);
                parts.push(loss_dc_with_vision(
                    model, vocab, &vision, bbox, caption_ids, mask_p, &mut rng,
                )?);
            }
        }
        if let Some(mean) = mean_of(parts) {
            lb.set(TaskId::Dc, mean);
        }
    }
    Ok(lb)
}

fn merge(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    let mut out = LossBreakdown::new();
    for task in TaskId::ALL {
        if let Some(l) = a.get(task) {
            out.set(task, l.clone());
        } else if let Some(l) = b.get(task) {
            out.set(task, l.clone());
        }
    }
    out
}

/// What one pre-training step computed (batch-mean loss per enabled task that
/// had usable items, plus their sum — the backpropagated scalar).
pub struct PretrainReport {
    pub per_task: Vec<(TaskId, f64)>,
    pub total: f64,
}

fn apply(model: &mut Model, opt: &mut AdamW, lb: LossBreakdown) -> Result<PretrainReport, PretrainError> {
    if lb.is_empty() {
        return Err(PretrainError::EmptyStep);
    }
    let total = lb.total();
    model.params.zero_grad();
    total.backward();
    opt.step(&mut model.params);
    Ok(PretrainReport { per_task: lb.values(), total: total.scalar_value() })
}

/// One shared-mode step: both passes over the same batch, one update.
pub fn pretrain_step_shared(
    model: &mut Model,
    vocab: &Vocab,
    opt: &mut AdamW,
    batch: &[PretrainItem],
    tasks: &BTreeSet<TaskId>,
    mask_p: f64,
    step_seed: u64,
) -> Result<PretrainReport, PretrainError> {
    let p1 = pretrain_losses_pass1(model, vocab, batch, tasks, mask_p, step_seed)?;
    let p2 = pretrain_losses_pass2(model, vocab, batch, tasks, mask_p, step_seed)?;
    apply(model, opt, merge(p1, p2))
}

/// One two-pass step: the understanding pass runs over `batch1`, the
/// generation pass over `batch2`, and the summed loss drives one update.
/// With `batch1 == batch2` this computes bit-identical task losses to
/// [`pretrain_step_shared`].
pub fn pretrain_step_two_pass(
    model: &mut Model,
    vocab: &Vocab,
    opt: &mut AdamW,
    batch1: &[PretrainItem],
    batch2: &[PretrainItem],
    tasks: &BTreeSet<TaskId>,
    mask_p: f64,
    step_seed: u64,
) -> Result<PretrainReport, PretrainError> {
    let p1 = pretrain_losses_pass1(model, vocab, batch1, tasks, mask_p, step_seed)?;
    let p2 = pretrain_losses_pass2(model, vocab, batch2, tasks, mask_p, step_seed)?;
    apply(model, opt, merge(p1, p2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::microworld::{
        oracle_caption, oracle_corpus, oracle_qas, synthesize_microworld, MicroWorldSpec,
    };
    use crate::tensor::OptimConfig;

    fn all_tasks() -> BTreeSet<TaskId> {
        PASS1_TASKS.iter().chain(&PASS2_TASKS).copied().collect()
    }

    fn fixture(seed: u64) -> (Model, Vocab, Vec<PretrainItem>) {
        let corpus = oracle_corpus();
        let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();
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
        let model = Model::new(cfg, seed).unwrap();
        let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
        let items: Vec<PretrainItem> = synthesize_microworld(&spec, 4, 31)
            .unwrap()
            .into_iter()
            .map(|(img, scene)| {
                let qa = oracle_qas(&scene).into_iter().next().map(|qa| {
                    (vocab.encode(&qa.question), vocab.encode(&qa.answer))
                });
                let dc = scene
                    .shapes
                    .first()
                    .map(|s| (s.bbox, vocab.encode(&oracle_caption(s))));
                PretrainItem {
                    image: img.to_tensor().unwrap(),
                    caption_ids: vocab.encode(&img.caption),
                    qa,
                    dc,
                }
            })
            .collect();
        (model, vocab, items)
    }

    fn grads(model: &Model) -> Vec<(String, Vec<f64>)> {
        model
            .params
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }

    #[test]
    fn merged_backward_equals_accumulated_per_pass_backwards() {
        let (model, vocab, items) = fixture(3);
        let tasks = all_tasks();

        // merged: one backward over the summed graph
        let p1 = pretrain_losses_pass1(&model, &vocab, &items, &tasks, 0.6, 7).unwrap();
        let p2 = pretrain_losses_pass2(&model, &vocab, &items, &tasks, 0.6, 7).unwrap();
        model.params.zero_grad();
        merge(p1, p2).total().backward();
        let merged = grads(&model);

        // accumulated: one backward per pass, grads summing in the leaves
        let p1 = pretrain_losses_pass1(&model, &vocab, &items, &tasks, 0.6, 7).unwrap();
        let p2 = pretrain_losses_pass2(&model, &vocab, &items, &tasks, 0.6, 7).unwrap();
        model.params.zero_grad();
        p1.total().backward();
        p2.total().backward();
        let accumulated = grads(&model);

        for ((name, g1), (_, g2)) in merged.iter().zip(&accumulated) {
            for (a, b) in g1.iter().zip(g2) {
                let scale = a.abs().max(b.abs()).max(1e-12);
                assert!(
                    (a - b).abs() / scale <= 1e-6,
                    "{name}: accumulated grad differs ({a} vs {b})"
                );
            }
        }
    }

    #[test]
    fn shared_and_two_pass_agree_bitwise_on_identical_batches() {
        let (mut m1, vocab, items) = fixture(5);
        let (mut m2, _, _) = fixture(5);
        let mut o1 = AdamW::new(OptimConfig::default());
        let mut o2 = AdamW::new(OptimConfig::default());
        let tasks = all_tasks();

        let r1 = pretrain_step_shared(&mut m1, &vocab, &mut o1, &items, &tasks, 0.6, 11).unwrap();
        let r2 =
            pretrain_step_two_pass(&mut m2, &vocab, &mut o2, &items, &items, &tasks, 0.6, 11)
                .unwrap();
        assert_eq!(r1.total.to_bits(), r2.total.to_bits());
        assert_eq!(r1.per_task.len(), r2.per_task.len());
        for ((t1, v1), (t2, v2)) in r1.per_task.iter().zip(&r2.per_task) {
            assert_eq!(t1, t2);
            assert_eq!(v1.to_bits(), v2.to_bits(), "{} diverged", t1.name());
        }
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            for (x, y) in a.value().iter().zip(b.value().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn disabled_tasks_are_absent_and_small_batches_skip_contrastive() {
        let (mut model, vocab, items) = fixture(7);
        let mut opt = AdamW::new(OptimConfig::default());
        let only_ic: BTreeSet<TaskId> = [TaskId::Ic].into_iter().collect();
        let r = pretrain_step_shared(&mut model, &vocab, &mut opt, &items, &only_ic, 0.6, 1)
            .unwrap();
        assert_eq!(r.per_task.len(), 1);
        assert_eq!(r.per_task[0].0, TaskId::Ic);
        assert_eq!(r.total, r.per_task[0].1);

        // batch of one: ITC/ITM skip, per-item tasks still run
        let r = pretrain_step_shared(
            &mut model, &vocab, &mut opt, &items[..1], &all_tasks(), 0.6, 2,
        )
        .unwrap();
        let names: Vec<&str> = r.per_task.iter().map(|(t, _)| t.name()).collect();
        assert!(!names.contains(&"itc") && !names.contains(&"itm"));
        assert!(names.contains(&"ic") && names.contains(&"vqa"));

        let err = pretrain_step_shared(
            &mut model, &vocab, &mut opt, &items, &BTreeSet::new(), 0.6, 3,
        );
        assert!(matches!(err, Err(PretrainError::EmptyStep)));
    }

    #[test]
    fn a_short_run_reduces_every_task_loss() {
        let (mut model, vocab, items) = fixture(9);
        let mut opt = AdamW::new(OptimConfig { lr: 3e-3, ..OptimConfig::default() });
        let tasks = all_tasks();
        let first = pretrain_step_shared(&mut model, &vocab, &mut opt, &items, &tasks, 0.6, 0)
            .unwrap();
        let mut last = None;
        for step in 1..40u64 {
            last = Some(
                pretrain_step_shared(&mut model, &vocab, &mut opt, &items, &tasks, 0.6, step)
                    .unwrap(),
            );
        }
        let last = last.unwrap();
        assert!(
            last.total < first.total,
            "total failed to drop: {} -> {}",
            first.total,
            last.total
        );
    }
}
