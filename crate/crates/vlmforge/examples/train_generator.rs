//! Trains the region-conditioned generator from scratch on a small synthetic
//! world and shows what it learned: the three-part loss (caption + question +
//! answer) falling, then a dense caption and a question/answer pair decoded
//! for a region of a held-out image.
//!
//! Run with: `cargo run --example train_generator`

use vlmforge::generator::{batched_generate_qa, qa_prompt, sample_dense_caption, QaRequest, SamplingConfig};
use vlmforge::model::{Model, ModelConfig};
use vlmforge::pipeline::config::TrainConfig;
use vlmforge::pipeline::microworld::{oracle_corpus, synthesize_microworld, MicroWorldSpec};
use vlmforge::pipeline::train::{decode_images, generator_items, train_generator_loop};
use vlmforge::rng::{domain, stream_rng};
use vlmforge::tensor::no_grad;
use vlmforge::vocab::{QuestionType, Vocab};

fn main() {
    // A 32x32 world keeps this example at a few seconds of CPU.
    let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
    let (images, scenes): (Vec<_>, Vec<_>) =
        synthesize_microworld(&spec, 24, 11).unwrap().into_iter().unzip();
    let corpus = oracle_corpus();
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();

    let mut model = Model::new(
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
        0,
    )
    .unwrap();

    // The training pool: one item per templated QA pair, each carrying the
    // region it is about and that region's reference caption.
    let tensors = decode_images(&images).unwrap();
    let pool = generator_items(&vocab, &images, &scenes).unwrap();
    println!("training on {} (region, caption, question, answer) items", pool.len());

    let cfg = TrainConfig { steps: 400, batch_size: 8, lr: 1e-3, log_every: 80, ..TrainConfig::default() };
    train_generator_loop(&mut model, &vocab, &tensors, &pool, &cfg, 0, |step, r| {
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            println!(
                "  step {step:>4}  total {:.3} = caption {:.3} + question {:.3} + answer {:.3}",
                r.gen, r.dc, r.q, r.a
            );
        }
    })
    .unwrap();

    // Decode from the first scene's first shape region.
    let scene = &scenes[0];
    let shape = &scene.shapes[0];
    println!(
        "\nscene 0 ground truth: {} {} at {:?}",
        shape.color.name(),
        shape.kind.name(),
        shape.bbox
    );
    no_grad(|| {
        let samp = SamplingConfig { top_k: 1, ..SamplingConfig::default() };
        let image = &tensors[0];
        let boxed = model.encode_image(image, Some(&shape.bbox));
        let plain = model.encode_image(image, None);

        let mut rng = stream_rng(&[domain::DC_SAMPLE, 99]);
        let cap = sample_dense_caption(&model, &vocab, &boxed, &shape.bbox, &samp, &mut rng).unwrap();
        println!("decoded dense caption: {:?}", cap.text);

        let prompt = qa_prompt(&model, &vocab, QuestionType::What, &shape.bbox, &cap.token_ids)
            .expect("sampled captions are text-only");
        let qa = batched_generate_qa(
            &model,
            &vocab,
            vec![QaRequest {
                vision: &boxed,
                vision_plain: &plain,
                prompt,
                rng: stream_rng(&[domain::QA_SAMPLE, 99]),
            }],
            &samp,
        )
        .remove(0);
        match (&qa.question, &qa.answer) {
            (Some(q), Some(a)) => println!("decoded QA pair:       {q:?} -> {a:?}"),
            _ => println!("QA decode did not parse ({:?})", qa.parse_failure),
        }
    });
}
