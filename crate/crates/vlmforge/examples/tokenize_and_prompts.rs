//! The token layer: building a word vocabulary, encoding/decoding text,
//! quantizing bounding boxes into location tokens, and assembling the two
//! prompt grammars the models are trained on — region captioning and
//! region-conditioned question generation.
//!
//! Run with: `cargo run --example tokenize_and_prompts`

use vlmforge::vocab::{
    build_dc_prompt, build_qa_prompt, build_qa_target, parse_qa_output, BoundingBox,
    QuestionType, Vocab,
};

fn main() {
    // A vocabulary is built from a corpus: words at or above `min_freq` get
    // ids; everything else later encodes to [UNK]. 16 location bins per axis.
    let corpus = [
        "a red square",
        "a blue circle",
        "what color is the square",
        "where is the circle",
        "top left",
        "red",
    ];
    let vocab = Vocab::build(corpus, 1, 16).unwrap();
    println!("vocabulary: {} tokens total", vocab.len());

    // Round trip: encoding lowercases and splits on whitespace; decoding joins.
    let ids = vocab.encode("What color is the SQUARE");
    println!("encode(\"What color is the SQUARE\") = {ids:?}");
    println!("decode(...) = {:?}", vocab.decode(&ids));

    // Out-of-vocabulary words become [UNK] — visible in the decoded text.
    let oov = vocab.encode("a magenta square");
    println!("with an unknown word: {:?}", vocab.decode(&oov));

    // Boxes quantize to 4 location tokens: x1, y1, x2, y2, each into 16 bins.
    let bbox = BoundingBox::new(8, 8, 31, 47).unwrap();
    let locs = vocab.box_tokens(&bbox, 64, 64).unwrap();
    println!("\nbox {bbox:?} on a 64x64 image -> location tokens {locs:?}");

    // Dense-caption prompt: [BOS] <loc>*4 [EOS] — the model continues with
    // the caption text after a fresh [BOS].
    let dc = build_dc_prompt(&vocab, &bbox, 64, 64).unwrap();
    println!("caption prompt ids: {:?}", dc.ids);

    // QA prompt: [BOS] <qtype> [TASK_SEP] <loc>*4 [TASK_SEP] <caption> [EOS].
    // The caption span must be plain text — it is the region description the
    // question should be answerable from.
    let caption_ids = vocab.encode("a red square");
    let qa = build_qa_prompt(&vocab, QuestionType::What, &bbox, 64, 64, &caption_ids).unwrap();
    println!("QA prompt ids:      {:?}", qa.ids);

    // The training target glues question and answer with [QA_SEP]; decoding
    // emits the same shape, and `parse_qa_output` splits it back apart.
    let target = build_qa_target(
        &vocab,
        &vocab.encode("what color is the square"),
        &vocab.encode("red"),
    )
    .unwrap();
    println!("QA target ids:      {:?}", target.ids);
    let (q, a) = parse_qa_output(&vocab, &target.ids).unwrap();
    println!("parsed back -> question: {q:?}  answer: {a:?}");
}
