//! The dataset as files on disk: synthesize a world, bootstrap records with
//! the generation job, show that the job is resumable (a second run finds all
//! work done), and roll everything up into the manifest — totals, question
//! distribution, parse failures — plus the ground-truth accuracy report.
//!
//! Run with: `cargo run --example dataset_stats`

use vlmforge::filter::QaCandidate;
use vlmforge::model::{Model, ModelConfig};
use vlmforge::pipeline::config::TrainConfig;
use vlmforge::pipeline::jobs::{
    run_filter_job, run_generation_job, GenerateOptions, CANDIDATES_FILE, CAPTIONS_FILE,
    FILTERED_FILE,
};
use vlmforge::pipeline::microworld::{oracle_corpus, synthesize_microworld, MicroWorldSpec};
use vlmforge::pipeline::oracle::evaluate_candidates;
use vlmforge::pipeline::records::{read_jsonl, write_jsonl};
use vlmforge::pipeline::stats::{compute_stats, histogram};
use vlmforge::pipeline::train::{
    decode_images, filter_items, generator_items, train_filter_loop, train_generator_loop,
};
use vlmforge::vocab::{QuestionType, Vocab};

fn main() {
    let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
    let pairs = synthesize_microworld(&spec, 32, 33).unwrap();
    let (images, scenes): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
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
    println!("training generator and filter ...");
    let mut generator = Model::new(mcfg.clone(), 0).unwrap();
    let gp = generator_items(&vocab, &images, &scenes).unwrap();
    train_generator_loop(&mut generator, &vocab, &tensors, &gp, &tcfg, 0, |_, _| {}).unwrap();
    let mut answerer = Model::new(mcfg, 0).unwrap();
    let fp = filter_items(&vocab, &images, &scenes).unwrap();
    train_filter_loop(&mut answerer, &vocab, &tensors, &fp, &tcfg, 0, |_, _| {}).unwrap();

    // Lay the dataset out on disk and bootstrap records into it.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    write_jsonl(&out.join("images.jsonl"), &images).unwrap();
    let opts = GenerateOptions {
        qtypes: vec![QuestionType::What, QuestionType::Where, QuestionType::Binary],
        max_boxes_per_image: 2,
        seed: 9,
    };
    let r1 =
        run_generation_job(&generator, &vocab, &images, &Default::default(), &opts, out).unwrap();
    println!(
        "\ngeneration pass 1: {} images -> {} captions, {} candidates",
        r1.images_processed, r1.captions_written, r1.candidates_written
    );

    // The job checkpoints per image, so rerunning it has nothing left to do.
    let r2 =
        run_generation_job(&generator, &vocab, &images, &Default::default(), &opts, out).unwrap();
    println!(
        "generation pass 2: {} already done, {} processed (resumable job)",
        r2.images_done_previously, r2.images_processed
    );
    assert_eq!(r2.images_processed, 0);

    let fstats = run_filter_job(&answerer, &vocab, &images, &Default::default(), false, out).unwrap();
    println!("filter: kept {} of {} parsed candidates", fstats.kept, fstats.total);

    // Roll the record files up into the manifest.
    let manifest = compute_stats(
        "0000000000000000",
        &out.join("images.jsonl"),
        &out.join(CAPTIONS_FILE),
        &out.join(FILTERED_FILE),
    )
    .unwrap();
    println!(
        "\nmanifest: {} images, {} captions, {} qa records ({} parsed, {:?} kept)",
        manifest.images,
        manifest.dense_captions,
        manifest.qa_records,
        manifest.qa_parsed,
        manifest.qa_kept.unwrap()
    );
    println!(
        "per image: {:.2} captions, {:.2} qa records",
        manifest.avg_captions_per_image, manifest.avg_qa_per_image
    );
    let dist_sum: f64 = manifest.qtype_distribution.values().sum();
    println!("question-type distribution sums to {dist_sum}");
    print!("{}", histogram("parsed candidates by question type", &manifest.qtype_counts));
    if !manifest.parse_failures.is_empty() {
        print!("{}", histogram("parse failures", &manifest.parse_failures));
    }

    // Grade against the scenes' ground truth: kept pairs should be at least
    // as accurate as the full candidate pool (that is the filter's job).
    let (cands, _) = read_jsonl::<QaCandidate>(&out.join(FILTERED_FILE)).unwrap();
    let by_id = scenes.iter().map(|s| (s.id, s.clone())).collect();
    let report = evaluate_candidates(&cands, &by_id).unwrap();
    println!(
        "\noracle grading: accuracy over all parsed {:?}, over kept {:?}",
        report.accuracy_all, report.accuracy_kept
    );
    // Raw candidate records stay available next to the filtered ones.
    let (raw, _) = read_jsonl::<QaCandidate>(&out.join(CANDIDATES_FILE)).unwrap();
    assert_eq!(raw.len(), cands.len());
}
