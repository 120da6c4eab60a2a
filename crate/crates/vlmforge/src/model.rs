//! The vision-language network.
//!
//! Vision side: non-overlapping patch embedding (strided convolution), a stack
//! of pre-norm transformer layers, and *region conditioning*: a per-pixel
//! target-embedding map `E` (one learned 3-vector inside the box, another
//! outside) is reduced by a second strided convolution and added onto the
//! feature map right after the first vision layer:
//!
//! ```text
//! F = f_layer1 + Conv(E)
//! ```
//!
//! Text side: one transformer stack serving both encoder and decoder roles via
//! an attention-mode switch (causal vs bidirectional self-attention), with
//! cross-attention to the vision features in every layer. Token logits come
//! from the transposed token-embedding matrix plus a bias (weight tying).
//!
//! Global embeddings for contrastive training pool the vision map (mean over
//! patches) and the text stack (position 0), project, and L2-normalize. A
//! two-way matching head reads the fused position-0 state.
//!
//! All forwards are per-sample and deterministic; the same code path serves
//! training and inference (wrap calls in [`crate::tensor::no_grad`] to skip
//! graph recording without changing any computed value).

use serde::{Deserialize, Serialize};

use crate::rng::{domain, hash_str, stream_rng};
use crate::tensor::{box_fill, Parameters, Tensor};
use crate::vocab::BoundingBox;

/// Architecture hyperparameters. Stored (as JSON) inside every checkpoint;
/// loading a checkpoint whose config differs from the expected one is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image height and width in pixels (square images).
    pub image_size: usize,
    /// Patch edge length; kernel = stride = this for both convolutions.
    pub patch_size: usize,
    /// Hidden dimension, shared by vision and text.
    pub channels: usize,
    pub vision_layers: usize,
    /// May be 0 (degenerate text stack: embeddings straight to logits).
    pub text_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// FFN inner dim = channels * ffn_mult.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            channels: 64,
            vision_layers: 2,
            text_layers: 2,
            heads: 4,
            vocab_size: 0, // must be set from the vocabulary before use
            max_seq: 64,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    Config(String),
    #[error("checkpoint config mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return err(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.vision_layers == 0 {
            return err("need at least one vision layer (injection point)".into());
        }
        if self.vocab_size == 0 {
            return err("vocab_size is unset".into());
        }
        if self.max_seq < 8 {
            return err("max_seq must be at least 8".into());
        }
        if self.ffn_mult == 0 || self.channels == 0 {
            return err("channels and ffn_mult must be positive".into());
        }
        Ok(())
    }

    /// Patch-grid edge length (image_size / patch_size).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Which self-attention mask the text stack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Position m sees positions <= m (generation, causal MLM).
    Causal,
    /// Every position sees every position (encoder-style MLM, global text embedding).
    Bidirectional,
}

/// Where in the vision stack a feature map was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisionStage {
    /// Right after the first layer and the region injection.
    PostInjection,
    /// After the full stack and final norm — what the text stack attends to.
    Final,
}

/// Patch features, one row per patch in row-major grid order
/// (`tokens[y * grid_w + x]` is the patch at grid cell (x, y)).
pub struct VisionFeatureMap {
    pub tokens: Tensor, // [grid_h * grid_w, channels]
    pub grid_h: usize,
    pub grid_w: usize,
    pub stage: VisionStage,
}

/// Configuration plus named parameters. All forward methods live here.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

/// One standard-normal draw (Box–Muller over the stream's uniforms).
fn normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps ln() finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const INIT_STD: f64 = 0.02;
/// Contrastive temperature starts at the conventional 0.07.
const INIT_LOG_TEMP: f64 = -2.659_260_036_932_778; // ln 0.07

fn init_gauss(params: &mut Parameters, seed: u64, name: &str, shape: &[usize]) {
    let mut rng = stream_rng(&[domain::INIT, seed, hash_str(name)]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal(&mut rng) * INIT_STD).collect();
    params.insert(name, Tensor::param(data, shape));
}

fn init_const(params: &mut Parameters, name: &str, shape: &[usize], value: f64) {
    let n: usize = shape.iter().product();
    params.insert(name, Tensor::param(vec![value; n], shape));
}

/// Parameters of one transformer block (`cross` adds the vision cross-attention
/// sublayer).
fn init_block(params: &mut Parameters, seed: u64, prefix: &str, c: usize, f: usize, cross: bool) {
    let lin = |params: &mut Parameters, tag: &str, di: usize, dout: usize| {
        init_gauss(params, seed, &format!("{prefix}.{tag}.w"), &[di, dout]);
        init_const(params, &format!("{prefix}.{tag}.b"), &[dout], 0.0);
    };
    init_const(params, &format!("{prefix}.ln1.g"), &[c], 1.0);
    init_const(params, &format!("{prefix}.ln1.b"), &[c], 0.0);
    for t in ["sa.wq", "sa.wk", "sa.wv", "sa.wo"] {
        lin(params, t, c, c);
    }
    if cross {
        init_const(params, &format!("{prefix}.lnx.g"), &[c], 1.0);
        init_const(params, &format!("{prefix}.lnx.b"), &[c], 0.0);
        for t in ["xa.wq", "xa.wk", "xa.wv", "xa.wo"] {
            lin(params, t, c, c);
        }
    }
    init_const(params, &format!("{prefix}.ln2.g"), &[c], 1.0);
    init_const(params, &format!("{prefix}.ln2.b"), &[c], 0.0);
    lin(params, "ffn.w1", c, f);
    lin(params, "ffn.w2", f, c);
}

impl Model {
    /// Fresh parameters: weights N(0, 0.02) from a per-parameter-name stream,
    /// biases and norm offsets zero, norm gains one, region-conv bias zero (so
    /// injection starts as a near-no-op), temperature at its conventional start.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut params = Parameters::new();
        let c = cfg.channels;
        let p = cfg.patch_size;
        let f = c * cfg.ffn_mult;
        let v = cfg.vocab_size;

        let pm = &mut params;

        // vision: patch embedding, positions, region conditioning
        init_gauss(pm, seed, "vis.patch.w", &[c, 3, p, p]);
        init_const(pm, "vis.patch.b", &[c], 0.0);
        init_gauss(pm, seed, "vis.pos", &[cfg.n_patches(), c]);
        init_gauss(pm, seed, "vis.tgt.inside", &[3]);
        init_gauss(pm, seed, "vis.tgt.outside", &[3]);
        init_gauss(pm, seed, "vis.tgt.conv.w", &[c, 3, p, p]);
        init_const(pm, "vis.tgt.conv.b", &[c], 0.0);

        for i in 0..cfg.vision_layers {
            init_block(pm, seed, &format!("vis.l{i}"), c, f, false);
        }
        init_const(pm, "vis.ln_f.g", &[c], 1.0);
        init_const(pm, "vis.ln_f.b", &[c], 0.0);

        // text stack
        init_gauss(pm, seed, "txt.embed", &[v, c]);
        init_gauss(pm, seed, "txt.pos", &[cfg.max_seq, c]);
        for i in 0..cfg.text_layers {
            init_block(pm, seed, &format!("txt.l{i}"), c, f, true);
        }
        init_const(pm, "txt.ln_f.g", &[c], 1.0);
        init_const(pm, "txt.ln_f.b", &[c], 0.0);

        // heads
        init_const(pm, "head.lm_bias", &[v], 0.0);
        init_gauss(pm, seed, "head.itm.w", &[c, 2]);
        init_const(pm, "head.itm.b", &[2], 0.0);
        init_gauss(pm, seed, "head.img_proj.w", &[c, c]);
        init_const(pm, "head.img_proj.b", &[c], 0.0);
        init_gauss(pm, seed, "head.txt_proj.w", &[c, c]);
        init_const(pm, "head.txt_proj.b", &[c], 0.0);
        init_const(pm, "head.log_temp", &[1], INIT_LOG_TEMP);

        Ok(Model { cfg, params })
    }

    /// Wraps existing parameters (checkpoint load). The caller has already
    /// verified the config (see [`crate::tensor::load_checkpoint`] usage).
    pub fn from_parts(cfg: ModelConfig, params: Parameters) -> Result<Model, ModelError> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    fn p(&self, name: &str) -> Tensor {
        self.params.get(name).clone()
    }

    fn layer_norm(&self, x: &Tensor, prefix: &str) -> Tensor {
        x.layer_norm(&self.p(&format!("{prefix}.g")), &self.p(&format!("{prefix}.b")), 1e-5)
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> Tensor {
        x.matmul(&self.p(&format!("{prefix}.w")))
            .add_bias(&self.p(&format!("{prefix}.b")))
    }

    /// Multi-head scaled dot-product attention; `causal` adds the
    /// strictly-upper-triangular -1e30 mask (queries and keys must then be the
    /// same sequence).
    fn attention(&self, x_q: &Tensor, x_kv: &Tensor, prefix: &str, causal: bool) -> Tensor {
        let heads = self.cfg.heads;
        let dh = self.cfg.channels / heads;
        let q = self.linear(x_q, &format!("{prefix}.wq"));
        let k = self.linear(x_kv, &format!("{prefix}.wk"));
        let v = self.linear(x_kv, &format!("{prefix}.wv"));
        let tq = x_q.shape()[0];
        let tk = x_kv.shape()[0];
        let mask = if causal {
            assert_eq!(tq, tk, "model: causal attention needs query == key sequence");
            Some(causal_mask(tq))
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let mut scores = qh.matmul_nt(&kh).scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m);
            }
            head_outs.push(scores.softmax(1).matmul(&vh));
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let merged = Tensor::concat_cols(&refs);
        self.linear(&merged, &format!("{prefix}.wo"))
    }

    fn ffn(&self, x: &Tensor, prefix: &str) -> Tensor {
        let h = self.linear(x, &format!("{prefix}.w1")).gelu();
        self.linear(&h, &format!("{prefix}.w2"))
    }

    /// One pre-norm block: self-attention, optional cross-attention, FFN, each
    /// residual.
    fn encoder_block(
        &self,
        x: &Tensor,
        prefix: &str,
        mode: AttentionMode,
        vision: Option<&Tensor>,
    ) -> Tensor {
        let n1 = self.layer_norm(x, &format!("{prefix}.ln1"));
        let causal = mode == AttentionMode::Causal;
        let mut h = x.add(&self.attention(&n1, &n1, &format!("{prefix}.sa"), causal));
        if let Some(vt) = vision {
            let nx = self.layer_norm(&h, &format!("{prefix}.lnx"));
            h = h.add(&self.attention(&nx, vt, &format!("{prefix}.xa"), false));
        }
        let n2 = self.layer_norm(&h, &format!("{prefix}.ln2"));
        h.add(&self.ffn(&n2, &format!("{prefix}.ffn")))
    }

    /// The per-pixel region map `E`: the `inside` 3-vector on the (inclusive)
    /// box, the `outside` 3-vector elsewhere; `None` = all `outside` (box-free
    /// tasks).
    pub fn target_embedding_map(&self, bbox: Option<&BoundingBox>) -> Tensor {
        let s = self.cfg.image_size;
        if let Some(b) = bbox {
            b.validate(s as u32, s as u32)
                .unwrap_or_else(|e| panic!("model: target_embedding_map: {e}"));
        }
        box_fill(
            &self.p("vis.tgt.inside"),
            &self.p("vis.tgt.outside"),
            bbox.map(|b| (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize)),
            s,
            s,
        )
    }

    /// Full vision pass: patch embed (+positions) → layer 1 → `F = f + Conv(E)`
    /// → remaining layers → final norm.
    pub fn encode_image(&self, image: &Tensor, bbox: Option<&BoundingBox>) -> VisionFeatureMap {
        let s = self.cfg.image_size;
        assert_eq!(
            image.shape(),
            &[3, s, s],
            "model: image shape {:?} does not match config {s}x{s}",
            image.shape()
        );
        let patches = image
            .conv2d(&self.p("vis.patch.w"), &self.p("vis.patch.b"), self.cfg.patch_size)
            .chw_to_pc()
            .add(&self.p("vis.pos"));

        let mut h = self.encoder_block(&patches, "vis.l0", AttentionMode::Bidirectional, None);

        let e = self.target_embedding_map(bbox);
        let inj = e
            .conv2d(&self.p("vis.tgt.conv.w"), &self.p("vis.tgt.conv.b"), self.cfg.patch_size)
            .chw_to_pc();
        h = h.add(&inj);

        for i in 1..self.cfg.vision_layers {
            h = self.encoder_block(&h, &format!("vis.l{i}"), AttentionMode::Bidirectional, None);
        }
        let tokens = self.layer_norm(&h, "vis.ln_f");
        VisionFeatureMap {
            tokens,
            grid_h: self.cfg.grid(),
            grid_w: self.cfg.grid(),
            stage: VisionStage::Final,
        }
    }

    /// Text-stack hidden states `[len, C]`. `vision: None` runs the stack
    /// unimodally (cross-attention sublayers skipped) — used for the global
    /// text embedding.
    pub fn decode_hidden(
        &self,
        ids: &[u32],
        vision: Option<&VisionFeatureMap>,
        mode: AttentionMode,
    ) -> Tensor {
        assert!(!ids.is_empty(), "model: cannot decode an empty sequence");
        assert!(
            ids.len() <= self.cfg.max_seq,
            "model: sequence length {} exceeds max_seq {}",
            ids.len(),
            self.cfg.max_seq
        );
        let rows: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let mut h = self
            .p("txt.embed")
            .gather_rows(&rows)
            .add(&self.p("txt.pos").gather_rows(&pos));
        let vt = vision.map(|v| &v.tokens);
        for i in 0..self.cfg.text_layers {
            h = self.encoder_block(&h, &format!("txt.l{i}"), mode, vt);
        }
        self.layer_norm(&h, "txt.ln_f")
    }

    /// Per-position vocabulary logits `[len, V]` (tied LM head).
    pub fn decode_logits(
        &self,
        ids: &[u32],
        vision: Option<&VisionFeatureMap>,
        mode: AttentionMode,
    ) -> Tensor {
        self.decode_hidden(ids, vision, mode)
            .matmul_nt(&self.p("txt.embed"))
            .add_bias(&self.p("head.lm_bias"))
    }

    /// Unit-norm pooled text embedding `[1, C]` (unimodal, bidirectional,
    /// position-0 readout, projection).
    pub fn text_global_embedding(&self, ids: &[u32]) -> Tensor {
        let h = self.decode_hidden(ids, None, AttentionMode::Bidirectional);
        self.linear(&h.gather_rows(&[0]), "head.txt_proj").normalize_rows()
    }

    /// Unit-norm pooled image embedding `[1, C]` (mean over patches, projection).
    pub fn image_global_embedding(&self, vision: &VisionFeatureMap) -> Tensor {
        let n = vision.tokens.shape()[0];
        let pool = Tensor::from_vec(vec![1.0 / n as f64; n], &[1, n]).matmul(&vision.tokens);
        self.linear(&pool, "head.img_proj").normalize_rows()
    }

    /// Two-way match/mismatch logits `[1, 2]` from the fused position-0 state.
    pub fn itm_logits(&self, ids: &[u32], vision: &VisionFeatureMap) -> Tensor {
        let h = self.decode_hidden(ids, Some(vision), AttentionMode::Bidirectional);
        self.linear(&h.gather_rows(&[0]), "head.itm")
    }

    /// The learnable contrastive log-temperature.
    pub fn log_temp(&self) -> Tensor {
        self.p("head.log_temp")
    }
}

/// `[t, t]` additive mask: 0 on and below the diagonal, -1e30 above. Masked
/// scores underflow to exactly 0 after softmax, so prefix logits are
/// bit-identical regardless of suffix content.
fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = -1e30;
        }
    }
    Tensor::from_vec(m, &[t, t])
}

/// Converts interleaved u8 RGB rows (or any byte layout already in channel-major
/// `[3, s, s]` order) into the normalized constant tensor models consume.
/// Values map linearly from [0, 255] to [0, 1].
pub fn image_tensor(pixels_chw: &[u8], image_size: usize) -> Tensor {
    assert_eq!(
        pixels_chw.len(),
        3 * image_size * image_size,
        "model: pixel buffer length {} does not match 3x{image_size}x{image_size}",
        pixels_chw.len()
    );
    let data: Vec<f64> = pixels_chw.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(data, &[3, image_size, image_size])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 8,
            vision_layers: 2,
            text_layers: 2,
            heads: 2,
            vocab_size: 40,
            max_seq: 16,
            ffn_mult: 2,
        }
    }

    fn rand_image(seed: u64, s: usize) -> Tensor {
        let mut rng = stream_rng(&[99, seed]);
        let px: Vec<u8> = (0..3 * s * s).map(|_| rng.gen()).collect();
        image_tensor(&px, s)
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut c = tiny_cfg();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.vision_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn target_map_counts_inside_positions() {
        let m = Model::new(tiny_cfg(), 7).unwrap();
        let b = BoundingBox::new(2, 1, 4, 3).unwrap();
        let e = no_grad(|| m.target_embedding_map(Some(&b)).value());
        let inside = m.params.get("vis.tgt.inside").value();
        let s = 16;
        // count pixels whose channel-0 value equals the inside embedding
        let n_inside = (0..s * s)
            .filter(|i| e[*i] == inside[0])
            .count();
        assert_eq!(n_inside, 9); // (4-2+1)*(3-1+1)
        // box-free map is all outside
        let e2 = no_grad(|| m.target_embedding_map(None).value());
        let outside = m.params.get("vis.tgt.outside").value();
        assert!(e2[..s * s].iter().all(|&v| v == outside[0]));
        // full-coverage box is all inside
        let full = BoundingBox::new(0, 0, 15, 15).unwrap();
        let e3 = no_grad(|| m.target_embedding_map(Some(&full)).value());
        assert!(e3[..s * s].iter().all(|&v| v == inside[0]));
        // single-pixel box
        let px = BoundingBox::new(5, 5, 5, 5).unwrap();
        let e4 = no_grad(|| m.target_embedding_map(Some(&px)).value());
        assert_eq!((0..s * s).filter(|i| e4[*i] == inside[0]).count(), 1);
    }

    #[test]
    fn boxes_change_features_and_equal_embeddings_do_not() {
        let m = Model::new(tiny_cfg(), 3).unwrap();
        let img = rand_image(0, 16);
        let b1 = BoundingBox::new(0, 0, 6, 6).unwrap();
        let b2 = BoundingBox::new(9, 9, 15, 15).unwrap();
        let (f1, f2) = no_grad(|| {
            (
                m.encode_image(&img, Some(&b1)).tokens.value(),
                m.encode_image(&img, Some(&b2)).tokens.value(),
            )
        });
        let dist: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(dist > 0.0, "disjoint boxes must produce different features");

        // force e_t == e_t_bar: output becomes box-independent
        let m2 = Model::new(tiny_cfg(), 3).unwrap();
        let inside = m2.params.get("vis.tgt.inside").value();
        m2.params.get("vis.tgt.outside").set_data(&inside);
        let (g1, g2) = no_grad(|| {
            (
                m2.encode_image(&img, Some(&b1)).tokens.value(),
                m2.encode_image(&img, Some(&b2)).tokens.value(),
            )
        });
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn injection_is_local_with_single_vision_layer() {
        let mut cfg = tiny_cfg();
        cfg.vision_layers = 1; // nothing mixes patches after the injection
        let m = Model::new(cfg, 11).unwrap();
        let img = rand_image(1, 16);
        // two boxes that differ only inside patch (0,0): pixels 0..8 x 0..8
        let b1 = BoundingBox::new(0, 0, 3, 3).unwrap();
        let b2 = BoundingBox::new(0, 0, 7, 7).unwrap();
        let (f1, f2) = no_grad(|| {
            (
                m.encode_image(&img, Some(&b1)).tokens.value(),
                m.encode_image(&img, Some(&b2)).tokens.value(),
            )
        });
        let c = 8;
        // patch 0 covers the changed pixels: must differ
        assert!(f1[..c].iter().zip(&f2[..c]).any(|(a, b)| a != b));
        // patches 1..4 see identical E regions: bit-identical
        assert!(f1[c..].iter().zip(&f2[c..]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn causal_prefix_is_suffix_invariant() {
        let m = Model::new(tiny_cfg(), 5).unwrap();
        let img = rand_image(2, 16);
        let vis = no_grad(|| m.encode_image(&img, None));
        let a: Vec<u32> = vec![2, 30, 31, 32, 33, 3];
        let mut b = a.clone();
        b[4] = 17; // perturb position 4
        let (la, lb) = no_grad(|| {
            (
                m.decode_logits(&a, Some(&vis), AttentionMode::Causal).value(),
                m.decode_logits(&b, Some(&vis), AttentionMode::Causal).value(),
            )
        });
        let v = m.cfg.vocab_size;
        // positions 0..4 bit-identical; position 4 differs
        assert!(la[..4 * v].iter().zip(&lb[..4 * v]).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(la[4 * v..5 * v].iter().zip(&lb[4 * v..5 * v]).any(|(x, y)| x != y));

        // prefix truncation also leaves earlier logits bit-identical
        let lc = no_grad(|| m.decode_logits(&a[..4], Some(&vis), AttentionMode::Causal).value());
        assert!(la[..4 * v].iter().zip(&lc).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bidirectional_lets_later_tokens_reach_earlier_logits() {
        let m = Model::new(tiny_cfg(), 5).unwrap();
        let img = rand_image(2, 16);
        let vis = no_grad(|| m.encode_image(&img, None));
        let a: Vec<u32> = vec![2, 30, 31, 32, 33, 3];
        let mut b = a.clone();
        b[4] = 17;
        let (la, lb) = no_grad(|| {
            (
                m.decode_logits(&a, Some(&vis), AttentionMode::Bidirectional).value(),
                m.decode_logits(&b, Some(&vis), AttentionMode::Bidirectional).value(),
            )
        });
        let v = m.cfg.vocab_size;
        assert!(
            la[..v].iter().zip(&lb[..v]).any(|(x, y)| x != y),
            "perturbing a later token must be able to change position-0 logits"
        );
    }

    #[test]
    fn zero_text_layers_ignore_vision() {
        let mut cfg = tiny_cfg();
        cfg.text_layers = 0;
        let m = Model::new(cfg, 9).unwrap();
        let v1 = no_grad(|| m.encode_image(&rand_image(3, 16), None));
        let v2 = no_grad(|| m.encode_image(&rand_image(4, 16), None));
        let ids: Vec<u32> = vec![2, 10, 3];
        let (a, b) = no_grad(|| {
            (
                m.decode_logits(&ids, Some(&v1), AttentionMode::Causal).value(),
                m.decode_logits(&ids, Some(&v2), AttentionMode::Causal).value(),
            )
        });
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn global_embeddings_are_unit_norm_and_deterministic() {
        let m = Model::new(tiny_cfg(), 13).unwrap();
        let ids: Vec<u32> = vec![2, 20, 21, 3];
        let (t1, t2) = no_grad(|| {
            (
                m.text_global_embedding(&ids).value(),
                m.text_global_embedding(&ids).value(),
            )
        });
        let norm: f64 = t1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(t1, t2);
        let vis = no_grad(|| m.encode_image(&rand_image(5, 16), None));
        let i1 = no_grad(|| m.image_global_embedding(&vis).value());
        let inorm: f64 = i1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((inorm - 1.0).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "exceeds max_seq")]
    fn overlength_sequence_panics() {
        let m = Model::new(tiny_cfg(), 1).unwrap();
        let ids = vec![2u32; 17];
        m.decode_hidden(&ids, None, AttentionMode::Causal);
    }

    #[test]
    fn region_embeddings_receive_gradient_from_partial_box() {
        let m = Model::new(tiny_cfg(), 21).unwrap();
        let img = rand_image(6, 16);
        let b = BoundingBox::new(0, 0, 7, 7).unwrap(); // covers one patch of four
        let vis = m.encode_image(&img, Some(&b));
        let ids: Vec<u32> = vec![2, 30, 3];
        m.params.zero_grad();
        m.decode_logits(&ids, Some(&vis), AttentionMode::Causal)
            .sum()
            .backward();
        let gi = m.params.get("vis.tgt.inside").grad().unwrap();
        let go = m.params.get("vis.tgt.outside").grad().unwrap();
        assert!(gi.iter().any(|&g| g != 0.0), "inside embedding got no gradient");
        assert!(go.iter().any(|&g| g != 0.0), "outside embedding got no gradient");
    }

    #[test]
    fn itm_head_shape() {
        let m = Model::new(tiny_cfg(), 2).unwrap();
        let vis = no_grad(|| m.encode_image(&rand_image(7, 16), None));
        let l = no_grad(|| m.itm_logits(&[2, 10, 3], &vis));
        assert_eq!(l.shape(), &[1, 2]);
    }
}
