//! Multi-task pre-training over a mixed corpus: contrastive alignment (itc),
//! image-text matching (itm), captioning (ic), masked language modeling over
//! captions (imlm), question answering (vqa), and region captioning (dc).
//! The understanding tasks and the generation tasks run as two passes whose
//! losses sum into one update. The example shows the two batching modes agree
//! exactly when fed the same batch, then runs a short mixed loop and prints
//! each task's trajectory.
//!
//! Run with: `cargo run --example pretrain_multitask`

use std::collections::BTreeSet;

use vlmforge::model::{Model, ModelConfig};
use vlmforge::objectives::TaskId;
use vlmforge::pipeline::config::PretrainConfig;
use vlmforge::pipeline::microworld::{
    oracle_caption, oracle_corpus, oracle_qas, synthesize_microworld, MicroWorldSpec,
};
use vlmforge::pipeline::pretrain::{
    pretrain_step_shared, pretrain_step_two_pass, PretrainItem, PASS1_TASKS, PASS2_TASKS,
};
use vlmforge::pipeline::train::{decode_images, pretrain_loop};
use vlmforge::tensor::{AdamW, OptimConfig};
use vlmforge::vocab::Vocab;

fn main() {
    let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
    let (images, scenes): (Vec<_>, Vec<_>) =
        synthesize_microworld(&spec, 16, 41).unwrap().into_iter().unzip();
    let corpus = oracle_corpus();
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();
    let tensors = decode_images(&images).unwrap();

    // Every image gets its scene caption; QA pairs and region captions come
    // straight from the scene oracle here (the real pipeline would use the
    // bootstrapped, filtered records instead).
    let items: Vec<PretrainItem> = scenes
        .iter()
        .zip(&tensors)
        .zip(&images)
        .map(|((scene, tensor), rec)| {
            let qa = oracle_qas(scene).into_iter().next().map(|qa| {
                (vocab.encode(&qa.question), vocab.encode(&qa.answer))
            });
            let shape = &scene.shapes[0];
            PretrainItem {
                image: tensor.clone(),
                caption_ids: vocab.encode(&rec.caption),
                qa,
                dc: Some((shape.bbox, vocab.encode(&oracle_caption(shape)))),
            }
        })
        .collect();

    let mcfg = ModelConfig {
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
    let tasks: BTreeSet<TaskId> = PASS1_TASKS.iter().chain(&PASS2_TASKS).copied().collect();

    // Shared-batch and two-pass modes compute identical losses on identical
    // batches: the two passes just split which items feed which objectives.
    let batch = &items[..4];
    let mut m1 = Model::new(mcfg.clone(), 8).unwrap();
    let mut m2 = Model::new(mcfg.clone(), 8).unwrap();
    let mut o1 = AdamW::new(OptimConfig::default());
    let mut o2 = AdamW::new(OptimConfig::default());
    let shared = pretrain_step_shared(&mut m1, &vocab, &mut o1, batch, &tasks, 0.6, 123).unwrap();
    let two_pass =
        pretrain_step_two_pass(&mut m2, &vocab, &mut o2, batch, batch, &tasks, 0.6, 123).unwrap();
    println!("same batch, both modes:");
    for ((t, a), (_, b)) in shared.per_task.iter().zip(&two_pass.per_task) {
        println!("  {:<5} shared {a:.6}  two-pass {b:.6}", t.name());
        assert_eq!(a, b);
    }

    // A short mixed run; each task's loss should drift down.
    let cfg = PretrainConfig { steps: 60, batch_size: 4, lr: 2e-3, ..PretrainConfig::default() };
    let mut model = Model::new(mcfg, 8).unwrap();
    println!("\npre-training {} steps over {} items ...", cfg.steps, items.len());
    let history = pretrain_loop(&mut model, &vocab, &items, &cfg, &tasks, 17, |_, _| {}).unwrap();

    println!("{:<6} {:>10} {:>10}", "task", "first", "last");
    for task in &tasks {
        let series: Vec<f64> = history
            .iter()
            .filter_map(|(_, per_task)| {
                per_task.iter().find(|(t, _)| t == task).map(|(_, l)| *l)
            })
            .collect();
        if let (Some(first), Some(last)) = (series.first(), series.last()) {
            println!("{:<6} {first:>10.4} {last:>10.4}", task.name());
        }
    }
}
