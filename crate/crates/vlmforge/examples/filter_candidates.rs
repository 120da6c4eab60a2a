//! Answer-consistency filtering. A generator proposes QA pairs; a separately
//! trained answering model re-answers every question from the image alone
//! (beam search, box-free). A pair is kept only when the two answers agree
//! after normalization. The example trains both models, bootstraps candidates
//! through the real generation job, then walks through the filter's verdicts.
//!
//! Run with: `cargo run --example filter_candidates`

use vlmforge::filter::{filter_pairs, BeamConfig, QaCandidate};
use vlmforge::model::{Model, ModelConfig};
use vlmforge::pipeline::config::TrainConfig;
use vlmforge::pipeline::jobs::{run_generation_job, GenerateOptions, CANDIDATES_FILE};
use vlmforge::pipeline::microworld::{oracle_corpus, synthesize_microworld, MicroWorldSpec};
use vlmforge::pipeline::records::read_jsonl;
use vlmforge::pipeline::train::{
    decode_images, filter_items, generator_items, train_filter_loop, train_generator_loop,
};
use vlmforge::vocab::{QuestionType, Vocab};

fn main() {
    let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
    let (images, scenes): (Vec<_>, Vec<_>) =
        synthesize_microworld(&spec, 24, 21).unwrap().into_iter().unzip();
    let corpus = oracle_corpus();
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();
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
    let tensors = decode_images(&images).unwrap();
    let tcfg = TrainConfig { steps: 400, batch_size: 8, ..TrainConfig::default() };

    println!("training generator and filter ({} steps each) ...", tcfg.steps);
    let mut generator = Model::new(mcfg.clone(), 0).unwrap();
    let gen_pool = generator_items(&vocab, &images, &scenes).unwrap();
    train_generator_loop(&mut generator, &vocab, &tensors, &gen_pool, &tcfg, 0, |_, _| {}).unwrap();

    let mut answerer = Model::new(mcfg, 0).unwrap();
    let qa_pool = filter_items(&vocab, &images, &scenes).unwrap();
    train_filter_loop(&mut answerer, &vocab, &tensors, &qa_pool, &tcfg, 0, |_, _| {}).unwrap();

    // Bootstrap candidates with the real generation job (records on disk).
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions {
        qtypes: vec![QuestionType::What, QuestionType::Where, QuestionType::Binary],
        max_boxes_per_image: 2,
        seed: 5,
    };
    let report = run_generation_job(
        &generator,
        &vocab,
        &images,
        &Default::default(),
        &opts,
        dir.path(),
    )
    .unwrap();
    let (candidates, _) = read_jsonl::<QaCandidate>(&dir.path().join(CANDIDATES_FILE)).unwrap();
    let parsed: Vec<QaCandidate> = candidates.into_iter().filter(|c| c.is_parsed()).collect();
    println!(
        "generation produced {} candidates, {} of which parsed",
        report.candidates_written,
        parsed.len()
    );

    // Re-answer and keep the agreeing pairs.
    let by_id: std::collections::BTreeMap<u64, &_> =
        images.iter().map(|r| (r.id, r)).collect();
    let beam = BeamConfig::default();
    let (annotated, stats) = filter_pairs(
        &answerer,
        &vocab,
        parsed,
        |id| by_id[&id].to_tensor().unwrap(),
        &beam,
        false,
    );

    println!("\nfilter verdicts (beam width {}):", beam.beam);
    for c in annotated.iter().take(8) {
        println!(
            "  [{}] q: {:?}\n       generator: {:?}  filter: {:?}",
            if c.kept == Some(true) { "KEEP" } else { "DROP" },
            c.question.as_deref().unwrap(),
            c.generator_answer.as_deref().unwrap(),
            c.filter_answer.as_deref().unwrap(),
        );
    }

    println!("\nretention by question type:");
    for (qtype, r) in &stats.per_qtype {
        println!(
            "  {qtype:<8} kept {:>3} of {:>3}  ({})",
            r.kept,
            r.total,
            r.retention.map_or("n/a".into(), |v| format!("{:.0}%", 100.0 * v))
        );
    }
    println!(
        "overall: kept {} of {} ({})",
        stats.kept,
        stats.total,
        stats.retention.map_or("n/a".into(), |v| format!("{:.0}%", 100.0 * v))
    );
}
