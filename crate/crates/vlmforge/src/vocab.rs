//! Vocabulary, token grammar, box quantization, and masking.
//!
//! Token-id layout is fixed and position-stable:
//!
//! ```text
//! [0..7)              reserved specials: [PAD] [UNK] [BOS] [EOS] [TASK_SEP] [QA_SEP] [MASK]
//! [7..7+B)            location tokens [loc_0] .. [loc_{B-1}] (B quantization bins)
//! [.., ..+8)          question-type tokens [what] [how] [where] [who] [which] [why] [when] [binary]
//! remainder           text tokens, ordered by (frequency desc, lexicographic asc)
//! ```
//!
//! Text is tokenized at word level: lowercase, whitespace-split, out-of-vocabulary
//! words map to `[UNK]`.
//!
//! Prompt grammars:
//! - dense-caption prompt: `[BOS] [loc_x1] [loc_y1] [loc_x2] [loc_y2] [EOS]` (always 6 tokens);
//! - QA prompt: `[BOS] [qtype] [TASK_SEP] loc*4 [TASK_SEP] caption [EOS]`;
//! - QA target: `[BOS] question [QA_SEP] answer [EOS]` (also the question-answering
//!   input format: the filter conditions on exactly this sequence minus an answer).
//!
//! Masking replaces chosen positions with `[MASK]` and reports them as prediction
//! targets. A generative span's terminator (`[QA_SEP]` after a question, `[EOS]`
//! after an answer or caption) is part of the maskable span whenever the span is
//! non-empty — the model must be supervised on *stopping*, or decoding can never
//! terminate. `[BOS]`, `[TASK_SEP]` and `[PAD]` are never masked.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const TASK_SEP: u32 = 4;
pub const QA_SEP: u32 = 5;
pub const MASK: u32 = 6;
pub const NUM_SPECIALS: u32 = 7;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS as usize] =
    ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[TASK_SEP]", "[QA_SEP]", "[MASK]"];

/// Question-type inventory. The enum is fixed (ids must stay stable across
/// runs); which types a pipeline actually generates is a config choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    What,
    How,
    Where,
    Who,
    Which,
    Why,
    When,
    Binary,
}

impl QuestionType {
    pub const ALL: [QuestionType; 8] = [
        QuestionType::What,
        QuestionType::How,
        QuestionType::Where,
        QuestionType::Who,
        QuestionType::Which,
        QuestionType::Why,
        QuestionType::When,
        QuestionType::Binary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::How => "how",
            QuestionType::Where => "where",
            QuestionType::Who => "who",
            QuestionType::Which => "which",
            QuestionType::Why => "why",
            QuestionType::When => "when",
            QuestionType::Binary => "binary",
        }
    }

    pub fn token(self) -> String {
        format!("[{}]", self.name())
    }

    /// Stable ordinal (position in [`Self::ALL`]).
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|q| *q == self).unwrap()
    }

    pub fn from_name(name: &str) -> Option<QuestionType> {
        Self::ALL.iter().copied().find(|q| q.name() == name)
    }
}

/// Inclusive pixel-coordinate box: `x1 <= x <= x2`, `y1 <= y <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BoxError {
    #[error("inverted box: ({0},{1})..({2},{3})")]
    Inverted(u32, u32, u32, u32),
    #[error("box ({x2},{y2}) exceeds image bounds {w}x{h}")]
    OutOfBounds { x2: u32, y2: u32, w: u32, h: u32 },
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<BoundingBox, BoxError> {
        if x1 > x2 || y1 > y2 {
            return Err(BoxError::Inverted(x1, y1, x2, y2));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn validate(&self, w: u32, h: u32) -> Result<(), BoxError> {
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(BoxError::Inverted(self.x1, self.y1, self.x2, self.y2));
        }
        if self.x2 >= w || self.y2 >= h {
            return Err(BoxError::OutOfBounds {
                x2: self.x2,
                y2: self.y2,
                w,
                h,
            });
        }
        Ok(())
    }

    /// Pixel area under inclusive coordinates (always >= 1 for a valid box).
    pub fn area(&self) -> u64 {
        (self.x2 - self.x1 + 1) as u64 * (self.y2 - self.y1 + 1) as u64
    }
}

/// Quantizes coordinate `c` over an image extent of `extent` pixels into one of
/// `bins` location bins: `floor(c * bins / extent)`, clamped to the last bin.
/// Monotone in `c`; surjective onto the bin range whenever `extent >= bins`.
pub fn quantize_coord(c: u32, extent: u32, bins: u32) -> u32 {
    debug_assert!(extent > 0 && bins > 0);
    ((c as u64 * bins as u64 / extent as u64) as u32).min(bins - 1)
}

/// Per-position span tag. `Prompt` covers entire prompt segments (their
/// delimiters included); within target segments, structural specials are
/// `Separator` and content spans are `Question`/`Answer`/`Caption`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleTag {
    Prompt,
    Question,
    Answer,
    Separator,
    Caption,
}

/// A token-id sequence with per-position role tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<RoleTag>,
}

impl TokenSequence {
    pub fn new() -> TokenSequence {
        TokenSequence {
            ids: Vec::new(),
            roles: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u32, role: RoleTag) {
        self.ids.push(id);
        self.roles.push(role);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `self` followed by `other` as one sequence.
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        TokenSequence { ids, roles }
    }

    pub fn positions_of(&self, role: RoleTag) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }
}

impl Default for TokenSequence {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("reserved token {token} is not allowed inside a {segment} span")]
    ForbiddenToken { token: String, segment: &'static str },
    #[error("question span must be non-empty")]
    EmptyQuestion,
}

/// Why a decoded QA sequence failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    NoSeparator,
    EmptyQuestion,
    EmptyAnswer,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad vocabulary file: {0}")]
    Format(String),
}

/// The deterministic token table described in the module docs.
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    loc_bins: u32,
}

impl Vocab {
    /// Builds a vocabulary from corpus lines. Words below `min_freq` are
    /// dropped (they will encode as `[UNK]`). `loc_bins` fixes the location
    /// token count and therefore the id layout.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: u32,
        loc_bins: u32,
    ) -> Result<Vocab, VocabError> {
        let mut counts: HashMap<String, u32> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for word in line.split_whitespace() {
                any = true;
                *counts.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(VocabError::EmptyCorpus);
        }
        let mut words: Vec<(String, u32)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for b in 0..loc_bins {
            tokens.push(format!("[loc_{b}]"));
        }
        for q in QuestionType::ALL {
            tokens.push(q.token());
        }
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Ok(Vocab::from_tokens(tokens, loc_bins))
    }

    fn from_tokens(tokens: Vec<String>, loc_bins: u32) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            loc_bins,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees specials exist
    }

    pub fn loc_bins(&self) -> u32 {
        self.loc_bins
    }

    fn qtype_base(&self) -> u32 {
        NUM_SPECIALS + self.loc_bins
    }

    fn text_base(&self) -> u32 {
        self.qtype_base() + QuestionType::ALL.len() as u32
    }

    pub fn token_str(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn loc_token(&self, bin: u32) -> u32 {
        assert!(bin < self.loc_bins, "vocab: loc bin {bin} out of range");
        NUM_SPECIALS + bin
    }

    pub fn qtype_token(&self, q: QuestionType) -> u32 {
        self.qtype_base() + q.index() as u32
    }

    pub fn is_reserved_special(&self, id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn is_loc(&self, id: u32) -> bool {
        id >= NUM_SPECIALS && id < self.qtype_base()
    }

    pub fn is_qtype(&self, id: u32) -> bool {
        id >= self.qtype_base() && id < self.text_base()
    }

    pub fn is_text(&self, id: u32) -> bool {
        id >= self.text_base() && (id as usize) < self.tokens.len()
    }

    /// Lowercases, splits on whitespace, and maps each word to its id
    /// (`[UNK]` for out-of-vocabulary words).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lw = w.to_lowercase();
                self.index.get(lw.as_str()).copied().filter(|&id| self.is_text(id)).unwrap_or(UNK)
            })
            .collect()
    }

    /// Renders text tokens (and a literal `[UNK]`) separated by spaces; every
    /// other token kind is structural and skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<&str> = Vec::new();
        for &id in ids {
            if self.is_text(id) || id == UNK {
                words.push(self.token_str(id));
            }
        }
        words.join(" ")
    }

    /// Quantizes the four box coordinates into location-token ids, ordered
    /// `(x1, y1, x2, y2)`. X coordinates quantize over the width, Y over the
    /// height.
    pub fn box_tokens(&self, bbox: &BoundingBox, w: u32, h: u32) -> Result<[u32; 4], BoxError> {
        bbox.validate(w, h)?;
        Ok([
            self.loc_token(quantize_coord(bbox.x1, w, self.loc_bins)),
            self.loc_token(quantize_coord(bbox.y1, h, self.loc_bins)),
            self.loc_token(quantize_coord(bbox.x2, w, self.loc_bins)),
            self.loc_token(quantize_coord(bbox.y2, h, self.loc_bins)),
        ])
    }

    /// Writes the vocabulary file: `#`-prefixed header lines carrying the
    /// section counts, then one token per line; a token's id is its position
    /// among the non-header lines.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# vlmforge-vocab v1")?;
        writeln!(w, "# specials {NUM_SPECIALS}")?;
        writeln!(w, "# loc {}", self.loc_bins)?;
        writeln!(w, "# qtypes {}", QuestionType::ALL.len())?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, VocabError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut loc_bins: Option<u32> = None;
        let mut tokens = Vec::new();
        for line in f.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("specials"), Some(n)) if n != NUM_SPECIALS.to_string() => {
                        return Err(VocabError::Format(format!(
                            "expected {NUM_SPECIALS} specials, file declares {n}"
                        )));
                    }
                    (Some("loc"), Some(n)) => {
                        loc_bins = Some(n.parse().map_err(|_| {
                            VocabError::Format(format!("bad loc count {n:?}"))
                        })?);
                    }
                    _ => {}
                }
                continue;
            }
            if !line.trim().is_empty() {
                tokens.push(line.trim().to_string());
            }
        }
        let loc_bins =
            loc_bins.ok_or_else(|| VocabError::Format("missing '# loc N' header".into()))?;
        let expected_min = NUM_SPECIALS + loc_bins + QuestionType::ALL.len() as u32;
        if (tokens.len() as u32) < expected_min {
            return Err(VocabError::Format(format!(
                "file has {} tokens, needs at least {expected_min}",
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(VocabError::Format(format!(
                    "special slot {i} holds {:?}, expected {s:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens, loc_bins))
    }
}

// ---------------------------------------------------------------------------
// Prompt and target grammars
// ---------------------------------------------------------------------------

fn check_span_ids(
    vocab: &Vocab,
    ids: &[u32],
    segment: &'static str,
) -> Result<(), GrammarError> {
    for &id in ids {
        if !(vocab.is_text(id) || id == UNK) {
            return Err(GrammarError::ForbiddenToken {
                token: vocab.token_str(id).to_string(),
                segment,
            });
        }
    }
    Ok(())
}

/// `[BOS] loc*4 [EOS]`, role `Prompt` throughout. Always exactly 6 tokens.
pub fn build_dc_prompt(
    vocab: &Vocab,
    bbox: &BoundingBox,
    w: u32,
    h: u32,
) -> Result<TokenSequence, BoxError> {
    let locs = vocab.box_tokens(bbox, w, h)?;
    let mut seq = TokenSequence::new();
    seq.push(BOS, RoleTag::Prompt);
    for l in locs {
        seq.push(l, RoleTag::Prompt);
    }
    seq.push(EOS, RoleTag::Prompt);
    Ok(seq)
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// `[BOS] [qtype] [TASK_SEP] loc*4 [TASK_SEP] caption [EOS]`, role `Prompt`
/// throughout. The caption span must contain only text tokens (or `[UNK]`).
pub fn build_qa_prompt(
    vocab: &Vocab,
    qtype: QuestionType,
    bbox: &BoundingBox,
    w: u32,
    h: u32,
    caption_ids: &[u32],
) -> Result<TokenSequence, PromptError> {
    check_span_ids(vocab, caption_ids, "caption")?;
    let locs = vocab.box_tokens(bbox, w, h)?;
    let mut seq = TokenSequence::new();
    seq.push(BOS, RoleTag::Prompt);
    seq.push(vocab.qtype_token(qtype), RoleTag::Prompt);
    seq.push(TASK_SEP, RoleTag::Prompt);
    for l in locs {
        seq.push(l, RoleTag::Prompt);
    }
    seq.push(TASK_SEP, RoleTag::Prompt);
    for &c in caption_ids {
        seq.push(c, RoleTag::Prompt);
    }
    seq.push(EOS, RoleTag::Prompt);
    Ok(seq)
}

/// `[BOS] question [QA_SEP] answer [EOS]`. The question must be non-empty;
/// the answer may be empty (such candidates are discarded downstream). At most
/// one `[QA_SEP]` can appear by construction.
pub fn build_qa_target(
    vocab: &Vocab,
    question_ids: &[u32],
    answer_ids: &[u32],
) -> Result<TokenSequence, GrammarError> {
    if question_ids.is_empty() {
        return Err(GrammarError::EmptyQuestion);
    }
    check_span_ids(vocab, question_ids, "question")?;
    check_span_ids(vocab, answer_ids, "answer")?;
    let mut seq = TokenSequence::new();
    seq.push(BOS, RoleTag::Separator);
    for &q in question_ids {
        seq.push(q, RoleTag::Question);
    }
    seq.push(QA_SEP, RoleTag::Separator);
    for &a in answer_ids {
        seq.push(a, RoleTag::Answer);
    }
    seq.push(EOS, RoleTag::Separator);
    Ok(seq)
}

/// `[BOS] caption [EOS]` with the caption span maskable (dense-caption targets,
/// image captioning, masked-language-model text, and matching/contrastive text).
pub fn build_caption_target(
    vocab: &Vocab,
    caption_ids: &[u32],
) -> Result<TokenSequence, GrammarError> {
    check_span_ids(vocab, caption_ids, "caption")?;
    let mut seq = TokenSequence::new();
    seq.push(BOS, RoleTag::Separator);
    for &c in caption_ids {
        seq.push(c, RoleTag::Caption);
    }
    seq.push(EOS, RoleTag::Separator);
    Ok(seq)
}

/// Splits a decoded QA sequence into (question, answer) text at the first
/// `[QA_SEP]`. Structural tokens inside either span are dropped; empty spans
/// are failures.
pub fn parse_qa_output(vocab: &Vocab, ids: &[u32]) -> Result<(String, String), ParseFailure> {
    let sep = match ids.iter().position(|&id| id == QA_SEP) {
        Some(p) => p,
        None => return Err(ParseFailure::NoSeparator),
    };
    let question = vocab.decode(&ids[..sep]);
    let after = &ids[sep + 1..];
    let end = after
        .iter()
        .position(|&id| id == EOS)
        .unwrap_or(after.len());
    let answer = vocab.decode(&after[..end]);
    if question.is_empty() {
        return Err(ParseFailure::EmptyQuestion);
    }
    if answer.is_empty() {
        return Err(ParseFailure::EmptyAnswer);
    }
    Ok((question, answer))
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// How positions of the targeted span are selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    /// No masking, no targets.
    None,
    /// Every span position is masked (answer spans in QA training).
    Full,
    /// Independent Bernoulli(p) per span position.
    Random(f64),
}

/// A masking policy: which role's span to mask, how, and whether the span's
/// terminator token participates (see the module docs).
#[derive(Debug, Clone, Copy)]
pub struct MaskPolicy {
    pub mode: MaskMode,
    pub role: RoleTag,
    pub include_terminator: bool,
}

impl MaskPolicy {
    pub fn random(role: RoleTag, p: f64) -> MaskPolicy {
        MaskPolicy {
            mode: MaskMode::Random(p),
            role,
            include_terminator: true,
        }
    }

    pub fn full(role: RoleTag) -> MaskPolicy {
        MaskPolicy {
            mode: MaskMode::Full,
            role,
            include_terminator: true,
        }
    }

    pub fn none() -> MaskPolicy {
        MaskPolicy {
            mode: MaskMode::None,
            role: RoleTag::Caption,
            include_terminator: false,
        }
    }
}

/// Applies a mask policy. Returns the masked sequence and the (ascending)
/// target positions; `target[i]` was replaced by `[MASK]` and its original id
/// is the prediction label. Bernoulli draws consume `rng` in ascending position
/// order, one draw per eligible position.
pub fn apply_mask(
    seq: &TokenSequence,
    policy: &MaskPolicy,
    rng: &mut impl Rng,
) -> (TokenSequence, Vec<usize>) {
    let mut eligible = seq.positions_of(policy.role);
    if policy.include_terminator && !eligible.is_empty() {
        let after = eligible.last().unwrap() + 1;
        if after < seq.len() && (seq.ids[after] == QA_SEP || seq.ids[after] == EOS) {
            eligible.push(after);
        }
    }
    let targets: Vec<usize> = match policy.mode {
        MaskMode::None => Vec::new(),
        MaskMode::Full => eligible,
        MaskMode::Random(p) => eligible
            .into_iter()
            .filter(|_| rng.gen::<f64>() < p)
            .collect(),
    };
    let mut masked = seq.clone();
    for &pos in &targets {
        masked.ids[pos] = MASK;
    }
    (masked, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tiny_vocab() -> Vocab {
        Vocab::build(
            ["a red square", "a blue circle", "what color is the square", "red blue yes no"],
            1,
            100,
        )
        .unwrap()
    }

    #[test]
    fn id_layout_and_ordering() {
        // "a a b" with min_freq 2: only "a" survives; "b" path goes to UNK.
        let v = Vocab::build(["a a b"], 2, 10).unwrap();
        assert_eq!(v.len() as u32, NUM_SPECIALS + 10 + 8 + 1);
        assert_eq!(v.encode("a b"), vec![v.id_of("a").unwrap(), UNK]);
        // frequency desc, then lexicographic
        let v2 = Vocab::build(["b b a a c"], 1, 10).unwrap();
        let base = v2.text_base();
        assert_eq!(v2.token_str(base), "a");
        assert_eq!(v2.token_str(base + 1), "b");
        assert_eq!(v2.token_str(base + 2), "c");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocab::build([""], 1, 10),
            Err(VocabError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_round_trip_and_case() {
        let v = tiny_vocab();
        let ids = v.encode("Red SQUARE");
        assert_eq!(v.decode(&ids), "red square");
        // structural ids are skipped by decode; UNK renders literally
        let mut with_specials = vec![BOS];
        with_specials.extend(&ids);
        with_specials.push(UNK);
        with_specials.push(EOS);
        assert_eq!(v.decode(&with_specials), "red square [UNK]");
    }

    #[test]
    fn quantize_examples_and_clamp() {
        assert_eq!(quantize_coord(32, 64, 100), 50);
        assert_eq!(quantize_coord(63, 64, 100), 98);
        assert_eq!(quantize_coord(0, 64, 100), 0);
        // never reaches `bins` even at the extreme
        assert_eq!(quantize_coord(99, 100, 100), 99);
    }

    #[test]
    fn dc_prompt_is_exactly_six_tokens() {
        let v = tiny_vocab();
        let b = BoundingBox::new(4, 4, 31, 59).unwrap();
        let p = build_dc_prompt(&v, &b, 64, 64).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.ids[0], BOS);
        assert_eq!(*p.ids.last().unwrap(), EOS);
        assert!(p.ids[1..5].iter().all(|&id| v.is_loc(id)));
        assert!(p.roles.iter().all(|r| *r == RoleTag::Prompt));
        // quantized bins for (4,4,31,59) over 64x64 with B=100
        assert_eq!(p.ids[1], v.loc_token(6));
        assert_eq!(p.ids[2], v.loc_token(6));
        assert_eq!(p.ids[3], v.loc_token(48));
        assert_eq!(p.ids[4], v.loc_token(92));
    }

    #[test]
    fn qa_prompt_structure_and_caption_validation() {
        let v = tiny_vocab();
        let b = BoundingBox::new(0, 0, 10, 10).unwrap();
        let cap = v.encode("a red square");
        let p = build_qa_prompt(&v, QuestionType::What, &b, 64, 64, &cap).unwrap();
        assert_eq!(p.ids[0], BOS);
        assert_eq!(p.ids[1], v.qtype_token(QuestionType::What));
        assert_eq!(p.ids[2], TASK_SEP);
        assert_eq!(p.ids[7], TASK_SEP);
        assert_eq!(*p.ids.last().unwrap(), EOS);
        assert_eq!(p.len(), 9 + cap.len());
        // a caption smuggling a separator is rejected
        let mut bad = cap.clone();
        bad.push(QA_SEP);
        assert!(matches!(
            build_qa_prompt(&v, QuestionType::What, &b, 64, 64, &bad),
            Err(PromptError::Grammar(GrammarError::ForbiddenToken { .. }))
        ));
    }

    #[test]
    fn qa_target_round_trips_through_parse() {
        let v = tiny_vocab();
        let q = v.encode("what color is the square");
        let a = v.encode("red");
        let t = build_qa_target(&v, &q, &a).unwrap();
        assert_eq!(t.ids.iter().filter(|&&id| id == QA_SEP).count(), 1);
        let (pq, pa) = parse_qa_output(&v, &t.ids).unwrap();
        assert_eq!(pq, "what color is the square");
        assert_eq!(pa, "red");
        // empty answer is constructible but parses as a failure
        let t2 = build_qa_target(&v, &q, &[]).unwrap();
        assert_eq!(parse_qa_output(&v, &t2.ids), Err(ParseFailure::EmptyAnswer));
        assert!(matches!(
            build_qa_target(&v, &[], &a),
            Err(GrammarError::EmptyQuestion)
        ));
    }

    #[test]
    fn parse_failure_reasons() {
        let v = tiny_vocab();
        let ids = [BOS, v.id_of("red").unwrap(), EOS];
        assert_eq!(parse_qa_output(&v, &ids), Err(ParseFailure::NoSeparator));
        let ids = [BOS, QA_SEP, v.id_of("red").unwrap(), EOS];
        assert_eq!(parse_qa_output(&v, &ids), Err(ParseFailure::EmptyQuestion));
        // stray second separator lands in the answer span and is dropped as structural
        let r = v.id_of("red").unwrap();
        let ids = [BOS, r, QA_SEP, r, QA_SEP, r, EOS];
        assert_eq!(parse_qa_output(&v, &ids).unwrap().1, "red red");
    }

    #[test]
    fn full_mask_covers_answer_span_and_terminator() {
        let v = tiny_vocab();
        let q = v.encode("what color is the square");
        let a = v.encode("red blue");
        let t = build_qa_target(&v, &q, &a).unwrap();
        let mut rng = stream_rng(&[1]);
        let (masked, targets) = apply_mask(&t, &MaskPolicy::full(RoleTag::Answer), &mut rng);
        // answer span is positions 7,8; terminator EOS at 9
        assert_eq!(targets, vec![7, 8, 9]);
        assert!(targets.iter().all(|&p| masked.ids[p] == MASK));
        // question untouched
        assert_eq!(&masked.ids[1..6], &t.ids[1..6]);
        // BOS and QA_SEP untouched
        assert_eq!(masked.ids[0], BOS);
        assert_eq!(masked.ids[6], QA_SEP);
    }

    #[test]
    fn empty_span_masks_nothing_even_with_terminator() {
        let v = tiny_vocab();
        let t = build_qa_target(&v, &v.encode("what color"), &[]).unwrap();
        let mut rng = stream_rng(&[2]);
        let (m, targets) = apply_mask(&t, &MaskPolicy::full(RoleTag::Answer), &mut rng);
        assert!(targets.is_empty());
        assert_eq!(m.ids, t.ids);
    }

    #[test]
    fn random_mask_fraction_converges_to_p() {
        let v = tiny_vocab();
        let cap = v.encode("a red square and a blue circle is the what color no yes");
        let t = build_caption_target(&v, &cap).unwrap();
        let policy = MaskPolicy::random(RoleTag::Caption, 0.6);
        let mut rng = stream_rng(&[3]);
        let mut masked = 0usize;
        let mut eligible = 0usize;
        for _ in 0..20_000 {
            let (_, targets) = apply_mask(&t, &policy, &mut rng);
            masked += targets.len();
            eligible += cap.len() + 1; // span + EOS terminator
        }
        let frac = masked as f64 / eligible as f64;
        assert!((frac - 0.6).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn mask_none_is_identity() {
        let v = tiny_vocab();
        let t = build_caption_target(&v, &v.encode("a red square")).unwrap();
        let mut rng = stream_rng(&[4]);
        let (m, targets) = apply_mask(&t, &MaskPolicy::none(), &mut rng);
        assert_eq!(m, t);
        assert!(targets.is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("vlmforge-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        let v = tiny_vocab();
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.len(), v2.len());
        assert_eq!(v2.loc_bins(), 100);
        for id in 0..v.len() as u32 {
            assert_eq!(v.token_str(id), v2.token_str(id));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(5, 5, 4, 9).is_err());
        let b = BoundingBox::new(0, 0, 63, 63).unwrap();
        assert!(b.validate(64, 64).is_ok());
        assert!(b.validate(63, 64).is_err());
        assert_eq!(BoundingBox::new(2, 3, 4, 5).unwrap().area(), 9);
    }
}
