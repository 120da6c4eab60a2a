//! Consistency filtering.
//!
//! A filter model is a plain question-answering model: it consumes
//! `[BOS] question [QA_SEP]` plus box-free vision and decodes an answer by
//! beam search (hypotheses scored by mean per-token log-probability, ties
//! broken by token-id lexicographic order). A generated QA pair is kept only
//! when the filter's predicted answer matches the generator's answer exactly
//! (after [`normalize_answer`], or raw when strict mode is on).
//!
//! The beam's final pool always contains the pure greedy hypothesis, so the
//! returned hypothesis never scores below greedy; with beam 1 the search *is*
//! greedy decoding.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AttentionMode, Model, VisionFeatureMap};
use crate::objectives::loss_vqa;
use crate::tensor::{AdamW, Tensor};
use crate::vocab::{BoundingBox, ParseFailure, QuestionType, Vocab, BOS, EOS, MASK, QA_SEP};

/// Answer-decoding knobs for the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    /// Beam width (1 = greedy).
    pub beam: usize,
    pub max_answer_len: usize,
}

impl Default for BeamConfig {
    fn default() -> BeamConfig {
        BeamConfig { beam: 3, max_answer_len: 6 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam == 0 {
            return Err("beam must be >= 1".into());
        }
        if self.max_answer_len == 0 {
            return Err("max_answer_len must be >= 1".into());
        }
        Ok(())
    }
}

/// One generated QA candidate as it moves through the pipeline: produced by
/// the generation job, annotated (`filter_answer`, `kept`) by the filter job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaCandidate {
    #[serde(default = "crate::pipeline::records::schema_version_default")]
    pub schema_version: u32,
    pub image_id: u64,
    pub box_index: usize,
    pub bbox: BoundingBox,
    pub qtype: QuestionType,
    /// The dense caption the QA prompt conditioned on.
    pub caption: String,
    pub sample_index: usize,
    /// Raw decoded target ids (`[BOS] ... [EOS]`, as far as decoding got).
    pub raw_ids: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generator_answer: Option<String>,
    /// Why parsing failed; `None` with a present question/answer means parsed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parse_failure: Option<ParseFailure>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub filter_answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kept: Option<bool>,
}

impl QaCandidate {
    /// Parsed candidates carry both spans and no failure reason.
    pub fn is_parsed(&self) -> bool {
        self.parse_failure.is_none() && self.question.is_some() && self.generator_answer.is_some()
    }
}

/// Lowercases, trims, and collapses internal whitespace — nothing else.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A decoded filter answer with its score.
#[derive(Debug, Clone)]
pub struct AnswerPrediction {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Mean per-token log-probability (terminator included when present).
    pub score: f64,
    /// No hypothesis reached `[EOS]` within the length budget.
    pub truncated: bool,
}

/// Next-token logit row after `seq` (append `[MASK]`, causal pass, last row).
fn next_token_row(model: &Model, vision: &VisionFeatureMap, seq: &[u32]) -> Vec<f64> {
    let mut ids = seq.to_vec();
    ids.push(MASK);
    let logits = model.decode_logits(&ids, Some(vision), AttentionMode::Causal);
    let v = model.cfg.vocab_size;
    let all = logits.value();
    all[(ids.len() - 1) * v..].to_vec()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<u32>, // answer tokens; EOS terminates and is included in scoring
    sum_lp: f64,
    done: bool,
}

impl Hypothesis {
    fn mean(&self) -> f64 {
        if self.ids.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.sum_lp / self.ids.len() as f64
        }
    }
}

/// (mean desc, ids lex asc) comparison used for all final selections.
fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.mean()
        .partial_cmp(&a.mean())
        .unwrap()
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam-search answer prediction for `[BOS] question [QA_SEP] ?` over box-free
/// vision. Deterministic: expansion order, pruning, and the final pick all use
/// total orders. An immediate `[EOS]` yields the empty answer (the candidate
/// will then be discarded by the exact-match rule against any non-empty
/// generator answer).
pub fn predict_answer(
    model: &Model,
    vocab: &Vocab,
    vision: &VisionFeatureMap,
    question_ids: &[u32],
    cfg: &BeamConfig,
) -> AnswerPrediction {
    assert!(!question_ids.is_empty(), "filter: cannot predict from an empty question");
    let mut base = vec![BOS];
    base.extend_from_slice(question_ids);
    base.push(QA_SEP);
    // room for answer + EOS + the MASK probe
    let budget = cfg
        .max_answer_len
        .min(model.cfg.max_seq.saturating_sub(base.len() + 2));

    // Expansion ranks on the raw logit row with the decoder's comparator
    // (logit desc, id asc) so a width-1 beam picks bit-identical tokens to
    // greedy decoding; scores use the log-softmax of the same row.
    let expand = |hyp: &Hypothesis, width: usize| -> Vec<Hypothesis> {
        let mut seq = base.clone();
        seq.extend(&hyp.ids);
        let row = next_token_row(model, vision, &seq);
        let lps = log_softmax(&row);
        crate::generator::top_k_ids(&row, width)
            .into_iter()
            .map(|tok| {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                Hypothesis {
                    ids,
                    sum_lp: hyp.sum_lp + lps[tok as usize],
                    done: tok == EOS,
                }
            })
            .collect()
    };

    let run = |width: usize| -> Vec<Hypothesis> {
        let mut live = vec![Hypothesis { ids: Vec::new(), sum_lp: 0.0, done: false }];
        let mut pool: Vec<Hypothesis> = Vec::new();
        // one step beyond the budget gives a full-length answer its EOS chance
        for _ in 0..=budget {
            let mut cands: Vec<Hypothesis> = Vec::new();
            for h in &live {
                cands.extend(expand(h, width));
            }
            // prune by cumulative score (ties lex); completed go to the pool
            cands.sort_by(|a, b| {
                b.sum_lp.partial_cmp(&a.sum_lp).unwrap().then_with(|| a.ids.cmp(&b.ids))
            });
            cands.truncate(width);
            live = Vec::new();
            for c in cands {
                if c.done {
                    pool.push(c);
                } else if c.ids.len() >= budget {
                    // length cap: keep as a truncated hypothesis
                    pool.push(c);
                } else {
                    live.push(c);
                }
            }
            if live.is_empty() {
                break;
            }
        }
        pool.extend(live);
        pool
    };

    let mut pool = run(cfg.beam);
    if cfg.beam > 1 {
        // guarantee the greedy hypothesis is competing (see module docs)
        pool.extend(run(1));
    }
    pool.sort_by(better);
    let best = pool.into_iter().next().expect("beam always yields a hypothesis");
    let truncated = !best.done;
    let token_ids: Vec<u32> =
        best.ids.iter().copied().filter(|&t| t != EOS).collect();
    AnswerPrediction {
        text: vocab.decode(&token_ids),
        score: best.mean(),
        token_ids,
        truncated,
    }
}

/// One (image, question, answer) training triplet for the filter.
pub struct FilterTrainItem {
    pub image: Tensor,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

/// What one filter training step did.
pub struct FilterStepReport {
    pub loss: f64,
    pub used: usize,
    pub rejected: Vec<(usize, String)>,
}

/// One filter training step: per-item QA loss (question visible, answer fully
/// masked, box-free vision), batch mean, one optimizer step. Items with empty
/// answers or grammar violations are rejected per-item.
pub fn train_filter_step(
    model: &mut Model,
    vocab: &Vocab,
    opt: &mut AdamW,
    batch: &[FilterTrainItem],
    _rng: &mut impl Rng,
) -> Result<FilterStepReport, crate::generator::TrainError> {
    let mut acc: Option<Tensor> = None;
    let mut rejected = Vec::new();
    let mut used = 0usize;
    for (idx, item) in batch.iter().enumerate() {
        if item.answer_ids.is_empty() {
            rejected.push((idx, "empty answer".to_string()));
            continue;
        }
        let vision = model.encode_image(&item.image, None);
        match loss_vqa(model, vocab, &vision, &item.question_ids, &item.answer_ids) {
            Ok(l) => {
                used += 1;
                acc = Some(match acc {
                    Some(a) => a.add(&l),
                    None => l,
                });
            }
            Err(e) => rejected.push((idx, e.to_string())),
        }
    }
    let Some(sum) = acc else {
        return Err(crate::generator::TrainError::EmptyBatch(rejected.len()));
    };
    let loss = sum.scale(1.0 / used as f64);
    model.params.zero_grad();
    loss.backward();
    opt.step(&mut model.params);
    Ok(FilterStepReport { loss: loss.scalar_value(), used, rejected })
}

/// Per-question-type retention tallies.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct QtypeRetention {
    pub total: usize,
    pub kept: usize,
    /// `kept / total`; `null` when no candidates of this type exist.
    pub retention: Option<f64>,
}

/// Filtering outcome counters. `retention` is `null` for an empty input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub retention: Option<f64>,
    pub per_qtype: BTreeMap<String, QtypeRetention>,
}

/// Runs the filter over parsed candidates: predicts an answer per candidate
/// (vision encoded once per distinct image, candidates grouped by `image_id`),
/// sets `filter_answer` and `kept` by the exact-match rule, and tallies
/// retention. Candidate order is preserved; no other field is touched.
/// `strict` compares raw strings instead of normalized ones.
pub fn filter_pairs(
    model: &Model,
    vocab: &Vocab,
    mut candidates: Vec<QaCandidate>,
    mut image_of: impl FnMut(u64) -> Tensor,
    cfg: &BeamConfig,
    strict: bool,
) -> (Vec<QaCandidate>, FilterStats) {
    // group indices by image id so each image is encoded exactly once
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        assert!(
            c.is_parsed(),
            "filter: candidate {}/{}/{} is unparsed; partition before filtering",
            c.image_id,
            c.box_index,
            c.sample_index
        );
        by_image.entry(c.image_id).or_default().push(i);
    }

    for (image_id, indices) in &by_image {
        let image = image_of(*image_id);
        let vision = crate::tensor::no_grad(|| model.encode_image(&image, None));
        for &i in indices {
            let c = &mut candidates[i];
            let question_ids = vocab.encode(c.question.as_ref().unwrap());
            let pred = crate::tensor::no_grad(|| {
                predict_answer(model, vocab, &vision, &question_ids, cfg)
            });
            let gen_ans = c.generator_answer.as_ref().unwrap();
            let matched = if strict {
                *gen_ans == pred.text
            } else {
                normalize_answer(gen_ans) == normalize_answer(&pred.text)
            };
            c.filter_answer = Some(pred.text);
            c.kept = Some(matched);
        }
    }

    let mut per_qtype: BTreeMap<String, QtypeRetention> = BTreeMap::new();
    let mut kept = 0usize;
    for c in &candidates {
        let e = per_qtype.entry(c.qtype.name().to_string()).or_default();
        e.total += 1;
        if c.kept == Some(true) {
            e.kept += 1;
            kept += 1;
        }
    }
    for e in per_qtype.values_mut() {
        e.retention = Some(e.kept as f64 / e.total as f64);
    }
    let total = candidates.len();
    let stats = FilterStats {
        total,
        kept,
        retention: if total == 0 { None } else { Some(kept as f64 / total as f64) },
        per_qtype,
    };
    (candidates, stats)
}
