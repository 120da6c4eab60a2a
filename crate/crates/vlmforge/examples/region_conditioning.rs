//! How the model is told *which region* to describe: a learned "inside"
//! embedding is painted over the box's pixels and a learned "outside"
//! embedding everywhere else, and that map is convolved into the patch
//! features after the first vision layer. This example makes the mechanism
//! visible: the pixel map's composition, its two degenerate cases (full-image
//! box, and inside == outside), and the effect on the encoded features.
//!
//! Run with: `cargo run --example region_conditioning`

use vlmforge::model::{Model, ModelConfig};
use vlmforge::tensor::no_grad;
use vlmforge::vocab::BoundingBox;

fn main() {
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        channels: 24,
        vision_layers: 2,
        text_layers: 1,
        heads: 2,
        vocab_size: 32,
        max_seq: 32,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 42).unwrap();
    let image = vlmforge::model::image_tensor(&vec![128u8; 3 * 32 * 32], 32);

    no_grad(|| {
        // The raw region map E is [3, H, W]: each pixel holds either the
        // "inside" or the "outside" 3-vector.
        let bbox = BoundingBox::new(8, 4, 19, 15).unwrap();
        let e = model.target_embedding_map(Some(&bbox));
        let inside = model.target_embedding_map(None); // all-outside reference
        let (e_d, o_d) = (e.value(), inside.value());
        let hw = 32 * 32;
        let inside_px = (0..hw)
            .filter(|i| e_d[*i] != o_d[*i]) // channel 0 differs -> inside
            .count();
        let area = (19 - 8 + 1) * (15 - 4 + 1);
        println!("box {bbox:?}: {inside_px} pixels carry the inside embedding (box area {area})");
        assert_eq!(inside_px, area);

        // Degenerate case 1: the full-image box paints every pixel "inside",
        // so the map is uniform — the model sees "describe everything".
        let full = BoundingBox::new(0, 0, 31, 31).unwrap();
        let e_full = model.target_embedding_map(Some(&full)).value();
        let uniform = (0..hw).all(|i| {
            e_full[i] == e_full[0] && e_full[hw + i] == e_full[hw] && e_full[2 * hw + i] == e_full[2 * hw]
        });
        println!("full-image box -> uniform map: {uniform}");
        assert!(uniform);

        // Degenerate case 2: force inside == outside and the encoding stops
        // depending on the box at all.
        let tied = {
            let m = Model::new(model.cfg.clone(), 42).unwrap();
            let out_val = m.params.get("vis.tgt.outside").value();
            m.params.get("vis.tgt.inside").set_data(&out_val);
            m
        };
        let a = tied.encode_image(&image, Some(&bbox)).tokens.value();
        let b = tied.encode_image(&image, None).tokens.value();
        assert_eq!(a, b);
        println!("with inside == outside, boxed and box-free encodings are identical");

        // With distinct embeddings the box *does* move the features — compare
        // the feature map under two different boxes.
        let other = BoundingBox::new(0, 16, 15, 31).unwrap();
        let fa = model.encode_image(&image, Some(&bbox)).tokens.value();
        let fb = model.encode_image(&image, Some(&other)).tokens.value();
        let delta: f64 =
            fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>() / fa.len() as f64;
        println!("mean |feature delta| between two boxes: {delta:.4} (> 0: the box matters)");
        assert!(delta > 0.0);
    });
}
