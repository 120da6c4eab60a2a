//! Command-line front end. Each subcommand drives one pipeline stage over a
//! shared output directory, in the usual order:
//!
//! ```text
//! make-microworld → train-generator → train-filter → generate → filter
//!                 → stats / eval-oracle / pretrain
//! ```
//!
//! Configuration comes from an optional TOML file layered over built-in
//! defaults, with `--set key.path=value` overrides applied last.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use vlmforge::filter::QaCandidate;
use vlmforge::model::{Model, ModelConfig};
use vlmforge::pipeline::config::{load_config, RunConfig};
use vlmforge::pipeline::jobs::{
    run_filter_job, run_generation_job, GenerateOptions, CANDIDATES_FILE, CAPTIONS_FILE,
    FILTERED_FILE, FILTER_CKPT, GENERATOR_CKPT, IMAGES_FILE, MANIFEST_FILE, ORACLE_REPORT_FILE,
    PRETRAIN_CKPT, SCENES_FILE, VOCAB_FILE,
};
use vlmforge::pipeline::microworld::{oracle_corpus, synthesize_microworld, SceneRecord};
use vlmforge::pipeline::oracle::evaluate_files;
use vlmforge::pipeline::records::{read_jsonl, write_json, write_jsonl, DcRecord, ImageRecord};
use vlmforge::pipeline::stats::{compute_stats, histogram};
use vlmforge::pipeline::train::{
    decode_images, filter_items, generator_items, pretrain_items, pretrain_loop,
    train_filter_loop, train_generator_loop,
};
use vlmforge::tensor::{load_checkpoint, save_checkpoint};
use vlmforge::vocab::Vocab;

/// Per-step pre-training losses, kept next to the checkpoint.
const PRETRAIN_LOG_FILE: &str = "pretrain_log.json";

#[derive(Parser)]
#[command(
    name = "vlmforge",
    version,
    about = "Bootstraps a region-grounded caption/QA dataset with a trained \
             generator and answer-consistency filter, then pre-trains on it."
)]
struct Cli {
    /// TOML configuration file; missing keys fall back to defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-path override, e.g. --set train.steps=200 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Working directory for all inputs and outputs (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic shape world: images, scene ground truth, vocabulary.
    MakeMicroworld,
    /// Train the region-conditioned caption/question generator.
    TrainGenerator,
    /// Train the answering model used by the filter.
    TrainFilter,
    /// Decode dense captions and QA candidates for every image region.
    Generate,
    /// Re-answer every candidate and keep the agreeing ones.
    Filter,
    /// Tally the dataset manifest and print distributions.
    Stats,
    /// Multi-task pre-training over the bootstrapped dataset.
    Pretrain,
    /// Grade candidates against scene ground truth (all vs. kept accuracy).
    EvalOracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    match cli.cmd {
        Cmd::MakeMicroworld => make_microworld(&cfg),
        Cmd::TrainGenerator => train_generator(&cfg),
        Cmd::TrainFilter => train_filter(&cfg),
        Cmd::Generate => generate(&cfg),
        Cmd::Filter => filter(&cfg),
        Cmd::Stats => stats(&cfg),
        Cmd::Pretrain => pretrain(&cfg),
        Cmd::EvalOracle => eval_oracle(&cfg),
    }
}

fn make_microworld(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.microworld.spec();
    let pairs = synthesize_microworld(&spec, cfg.microworld.images, cfg.seed)
        .map_err(|e| anyhow!(e))?;
    let (images, scenes): (Vec<ImageRecord>, Vec<SceneRecord>) = pairs.into_iter().unzip();
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_jsonl(&cfg.out_dir.join(IMAGES_FILE), &images)?;
    write_jsonl(&cfg.out_dir.join(SCENES_FILE), &scenes)?;
    let corpus = oracle_corpus();
    let vocab = Vocab::build(
        corpus.iter().map(|s| s.as_str()),
        cfg.vocab.min_freq,
        cfg.vocab.loc_bins,
    )?;
    vocab.save(&cfg.out_dir.join(VOCAB_FILE))?;
    println!(
        "wrote {} images ({}x{} px), scene ground truth, and a {}-token vocabulary to {}",
        images.len(),
        spec.image_size,
        spec.image_size,
        vocab.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Loads the vocabulary and image records `make-microworld` produced.
fn load_world(cfg: &RunConfig) -> Result<(Vocab, Vec<ImageRecord>)> {
    let vocab_path = cfg.out_dir.join(VOCAB_FILE);
    let vocab = Vocab::load(&vocab_path)
        .with_context(|| format!("loading {} (run make-microworld first)", vocab_path.display()))?;
    let images_path = cfg.out_dir.join(IMAGES_FILE);
    let (images, malformed) = read_jsonl::<ImageRecord>(&images_path)
        .with_context(|| format!("loading {} (run make-microworld first)", images_path.display()))?;
    if malformed > 0 {
        eprintln!("warning: skipped {malformed} malformed lines in {}", images_path.display());
    }
    if images.is_empty() {
        bail!("{} holds no readable image records", images_path.display());
    }
    Ok((vocab, images))
}

fn load_scenes(cfg: &RunConfig) -> Result<Vec<SceneRecord>> {
    let path = cfg.out_dir.join(SCENES_FILE);
    let (scenes, malformed) = read_jsonl::<SceneRecord>(&path)
        .with_context(|| format!("loading {} (run make-microworld first)", path.display()))?;
    if malformed > 0 {
        eprintln!("warning: skipped {malformed} malformed lines in {}", path.display());
    }
    Ok(scenes)
}

/// Resolves the model configuration for this run: the architecture from
/// `[model]` with the vocabulary size filled in from the built vocabulary.
fn model_config(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelConfig> {
    if cfg.model.image_size != cfg.microworld.image_size as usize {
        bail!(
            "model.image_size ({}) must match microworld.image_size ({})",
            cfg.model.image_size,
            cfg.microworld.image_size
        );
    }
    Ok(ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() })
}

fn save_model(path: &Path, model: &Model, step: u64) -> Result<()> {
    let config_json = serde_json::to_string(&model.cfg)?;
    save_checkpoint(path, &config_json, &model.params, None, step)?;
    Ok(())
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Model> {
    let ck = load_checkpoint(path).with_context(|| {
        format!("loading {} (run the matching train subcommand first)", path.display())
    })?;
    let mcfg: ModelConfig = serde_json::from_str(&ck.config_json)
        .context("checkpoint carries an unreadable model config")?;
    if mcfg.vocab_size != vocab.len() {
        bail!(
            "checkpoint {} was trained with a {}-token vocabulary but the current one has {}",
            path.display(),
            mcfg.vocab_size,
            vocab.len()
        );
    }
    Ok(Model::from_parts(mcfg, ck.to_parameters())?)
}

fn train_generator(cfg: &RunConfig) -> Result<()> {
    let (vocab, images) = load_world(cfg)?;
    let scenes = load_scenes(cfg)?;
    let tensors = decode_images(&images)?;
    let pool = generator_items(&vocab, &images, &scenes)?;
    let mut model = Model::new(model_config(cfg, &vocab)?, cfg.seed)?;
    println!(
        "training generator: {} items, {} steps, batch {}",
        pool.len(),
        cfg.train.steps,
        cfg.train.batch_size
    );
    let t0 = Instant::now();
    let log_every = cfg.train.log_every.max(1);
    train_generator_loop(&mut model, &vocab, &tensors, &pool, &cfg.train, cfg.seed, |step, r| {
        if step % log_every == 0 || step + 1 == cfg.train.steps {
            println!(
                "step {step:>5}  total {:.4}  caption {:.4}  question {:.4}  answer {:.4}",
                r.gen, r.dc, r.q, r.a
            );
        }
    })?;
    let path = cfg.out_dir.join(GENERATOR_CKPT);
    save_model(&path, &model, cfg.train.steps)?;
    println!("saved {} after {:.1}s", path.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn train_filter(cfg: &RunConfig) -> Result<()> {
    let (vocab, images) = load_world(cfg)?;
    let scenes = load_scenes(cfg)?;
    let tensors = decode_images(&images)?;
    let pool = filter_items(&vocab, &images, &scenes)?;
    let mut model = Model::new(model_config(cfg, &vocab)?, cfg.seed)?;
    println!(
        "training filter: {} items, {} steps, batch {}",
        pool.len(),
        cfg.train_filter.steps,
        cfg.train_filter.batch_size
    );
    let t0 = Instant::now();
    let log_every = cfg.train_filter.log_every.max(1);
    train_filter_loop(
        &mut model,
        &vocab,
        &tensors,
        &pool,
        &cfg.train_filter,
        cfg.seed,
        |step, r| {
            if step % log_every == 0 || step + 1 == cfg.train_filter.steps {
                println!("step {step:>5}  answer {:.4}", r.loss);
            }
        },
    )?;
    let path = cfg.out_dir.join(FILTER_CKPT);
    save_model(&path, &model, cfg.train_filter.steps)?;
    println!("saved {} after {:.1}s", path.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let (vocab, images) = load_world(cfg)?;
    let model = load_model(&cfg.out_dir.join(GENERATOR_CKPT), &vocab)?;
    let opts = GenerateOptions {
        qtypes: cfg.generate.parsed_qtypes()?,
        max_boxes_per_image: cfg.generate.max_boxes_per_image,
        seed: cfg.seed,
    };
    let t0 = Instant::now();
    let report = run_generation_job(&model, &vocab, &images, &cfg.sampling, &opts, &cfg.out_dir)?;
    println!(
        "processed {} of {} images ({} already done, {} corrupt): +{} captions, +{} candidates in {:.1}s",
        report.images_processed,
        report.images_total,
        report.images_done_previously,
        report.images_skipped_corrupt,
        report.captions_written,
        report.candidates_written,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn filter(cfg: &RunConfig) -> Result<()> {
    let (vocab, images) = load_world(cfg)?;
    let model = load_model(&cfg.out_dir.join(FILTER_CKPT), &vocab)?;
    let t0 = Instant::now();
    let stats = run_filter_job(&model, &vocab, &images, &cfg.beam, cfg.filter.strict, &cfg.out_dir)?;
    match stats.retention {
        Some(r) => println!(
            "kept {} of {} parsed candidates ({:.1}%) in {:.1}s",
            stats.kept,
            stats.total,
            100.0 * r,
            t0.elapsed().as_secs_f64()
        ),
        None => println!("no parsed candidates to filter"),
    }
    Ok(())
}

/// The filtered records when the filter has run, otherwise the raw candidates.
fn newest_candidates(cfg: &RunConfig) -> PathBuf {
    let filtered = cfg.out_dir.join(FILTERED_FILE);
    if filtered.exists() {
        filtered
    } else {
        cfg.out_dir.join(CANDIDATES_FILE)
    }
}

fn stats(cfg: &RunConfig) -> Result<()> {
    let manifest = compute_stats(
        &cfg.hash(),
        &cfg.out_dir.join(IMAGES_FILE),
        &cfg.out_dir.join(CAPTIONS_FILE),
        &newest_candidates(cfg),
    )?;
    write_json(&cfg.out_dir.join(MANIFEST_FILE), &manifest)?;
    println!(
        "images {}  dense captions {}  qa records {} (parsed {})",
        manifest.images, manifest.dense_captions, manifest.qa_records, manifest.qa_parsed
    );
    if let (Some(kept), Some(r)) = (manifest.qa_kept, manifest.retention) {
        println!("kept {kept} ({:.1}% of parsed)", 100.0 * r);
    }
    println!(
        "avg captions/image {:.2}  avg qa/image {:.2}",
        manifest.avg_captions_per_image, manifest.avg_qa_per_image
    );
    if !manifest.qtype_counts.is_empty() {
        print!("{}", histogram("parsed candidates by question type", &manifest.qtype_counts));
    }
    if !manifest.parse_failures.is_empty() {
        print!("{}", histogram("parse failures", &manifest.parse_failures));
    }
    println!("manifest written to {}", cfg.out_dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let (vocab, images) = load_world(cfg)?;
    let tensors = decode_images(&images)?;
    let captions_path = cfg.out_dir.join(CAPTIONS_FILE);
    let captions: Vec<DcRecord> = if captions_path.exists() {
        read_jsonl(&captions_path)?.0
    } else {
        Vec::new()
    };
    let filtered_path = cfg.out_dir.join(FILTERED_FILE);
    let candidates: Vec<QaCandidate> = if filtered_path.exists() {
        read_jsonl(&filtered_path)?.0
    } else {
        Vec::new()
    };
    let items = pretrain_items(&vocab, &images, &tensors, &captions, &candidates);
    let with_qa = items.iter().filter(|i| i.qa.is_some()).count();
    let with_dc = items.iter().filter(|i| i.dc.is_some()).count();
    let tasks = cfg.pretrain.parsed_tasks()?;
    let task_names: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
    println!(
        "pre-training on {} images ({} with kept QA, {} with dense captions); tasks: {}; mode: {}",
        items.len(),
        with_qa,
        with_dc,
        task_names.join(" "),
        if cfg.pretrain.two_pass { "two-pass" } else { "shared-batch" }
    );
    let mut model = Model::new(model_config(cfg, &vocab)?, cfg.seed)?;
    let t0 = Instant::now();
    let log_every = cfg.pretrain.log_every.max(1);
    let history = pretrain_loop(&mut model, &vocab, &items, &cfg.pretrain, &tasks, cfg.seed, |step, r| {
        if step % log_every == 0 || step + 1 == cfg.pretrain.steps {
            let parts: Vec<String> =
                r.per_task.iter().map(|(t, l)| format!("{} {l:.4}", t.name())).collect();
            println!("step {step:>5}  total {:.4}  [{}]", r.total, parts.join("  "));
        }
    })?;
    let ckpt = cfg.out_dir.join(PRETRAIN_CKPT);
    save_model(&ckpt, &model, cfg.pretrain.steps)?;
    write_json(&cfg.out_dir.join(PRETRAIN_LOG_FILE), &history)?;
    println!(
        "saved {} and {} after {:.1}s",
        ckpt.display(),
        PRETRAIN_LOG_FILE,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval_oracle(cfg: &RunConfig) -> Result<()> {
    let report =
        evaluate_files(&newest_candidates(cfg), &cfg.out_dir.join(SCENES_FILE))?;
    write_json(&cfg.out_dir.join(ORACLE_REPORT_FILE), &report)?;
    println!(
        "graded {} candidates: {} parsed, {} kept, {} ungradable",
        report.candidates, report.parsed, report.kept, report.ungradable
    );
    match report.accuracy_all {
        Some(a) => println!("accuracy over all parsed candidates: {:.1}%", 100.0 * a),
        None => println!("accuracy over all parsed candidates: n/a"),
    }
    match report.accuracy_kept {
        Some(a) => println!("accuracy over kept candidates:       {:.1}%", 100.0 * a),
        None => println!("accuracy over kept candidates:       n/a"),
    }
    println!("report written to {}", cfg.out_dir.join(ORACLE_REPORT_FILE).display());
    Ok(())
}
