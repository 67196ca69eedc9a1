//! The plane recovery network.
//!
//! Stages: a strided-conv feature pyramid; a transformer encoder over the
//! coarsest level (context tokens); a line-segment tokenizer that samples
//! the stride-4 level at segment endpoints; two parallel decoders sharing
//! the plane queries (one over context tokens, one over line tokens) whose
//! outputs are summed; per-query heads; and three top-down pixel decoders
//! (embedding, depth, center).
//!
//! Layout conventions: token sequences are `[len, d]`, feature maps are
//! `[channels, h, w]`, pixel maps are `[channels, H * W]`.

mod layers;
pub mod params;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Axis, Tape, Var};
use crate::geometry::{LineSegment, PlaneParam};
use crate::scene::PlanarScene;
use crate::tensor::Tensor;
use layers::{bilinear_taps, grid_positions, upsample_taps, Ctx, Init};
pub use layers::sine_encoding;
pub use params::{load_tensors, save_tensors, CheckpointError, ParamStore};

/// Column of the class logits holding the "plane" class.
pub const PLANE_CLASS: usize = 0;
/// Stride of the pyramid level line endpoints are sampled from.
pub const LINE_STRIDE: usize = 4;
/// Initial depth prediction (meters) of the depth decoder.
const INITIAL_DEPTH: f64 = 3.0;
/// RGB plus normalized x and y pixel coordinates.
const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width `d`.
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_width: usize,
    pub backbone_channels: [usize; 4],
    pub pixel_channels: usize,
    /// Number of plane queries `K`.
    pub queries: usize,
    /// Instance embedding width `ε`.
    pub embed_dim: usize,
    /// Builds the line tokenizer and line decoder branch.
    pub use_lines: bool,
    /// Builds the instance and pixel center heads.
    pub use_center: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_width: 1024,
            backbone_channels: [32, 64, 128, 256],
            pixel_channels: 64,
            queries: 20,
            embed_dim: 8,
            use_lines: true,
            use_center: true,
        }
    }
}

impl ModelConfig {
    /// Reduced model that trains on a single CPU core in reasonable time.
    pub fn small() -> Self {
        Self {
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_width: 128,
            backbone_channels: [16, 32, 48, 64],
            pixel_channels: 16,
            ..Self::default()
        }
    }

    /// Minimal model for gradient checks.
    pub fn tiny() -> Self {
        Self {
            width: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_width: 16,
            backbone_channels: [4, 4, 8, 8],
            pixel_channels: 4,
            queries: 4,
            embed_dim: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.width % 4 != 0 {
            return err(format!("width {} must be a positive multiple of 4", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return err(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.decoder_layers == 0 {
            return err("at least one decoder layer is required".into());
        }
        if self.queries == 0 || self.embed_dim == 0 || self.ffn_width == 0 || self.pixel_channels == 0 {
            return err("queries, embed_dim, ffn_width and pixel_channels must be positive".into());
        }
        if self.backbone_channels.contains(&0) {
            return err("backbone channels must be positive".into());
        }
        Ok(())
    }

    /// Short hash identifying the architecture.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One image plus its line segments.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// Channel-major `[3, height, width]` values in `[0, 1]`.
    pub image: &'a [f64],
    pub width: usize,
    pub height: usize,
    pub lines: &'a [LineSegment],
}

impl<'a> ModelInput<'a> {
    /// Input for a scene; `image_chw` must come from `scene.image_chw()`.
    pub fn from_scene(scene: &'a PlanarScene, image_chw: &'a [f64]) -> Self {
        Self {
            image: image_chw,
            width: scene.width,
            height: scene.height,
            lines: &scene.line_segments,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Record parameters as gradient leaves.
    pub trainable: bool,
    /// Feed line tokens to the line branch; `false` runs the context-only
    /// path as if the line sequence were empty.
    pub use_lines: bool,
    /// Apply the heads to every intermediate decoder output.
    pub aux: bool,
    /// Run the pixel decoders.
    pub pixels: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            trainable: true,
            use_lines: true,
            aux: true,
            pixels: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            trainable: false,
            use_lines: true,
            aux: false,
            pixels: true,
        }
    }
}

/// Per-query head outputs.
#[derive(Clone, Copy)]
pub struct Prediction<'t> {
    /// `[K, 2]` class logits.
    pub logits: Var<'t>,
    /// `[K, 2]` softmax of the logits.
    pub probs: Var<'t>,
    /// `[K, 3]` plane parameters.
    pub params: Var<'t>,
    /// `[K, 2]` normalized plane centers.
    pub centers: Option<Var<'t>>,
    /// `[K, ε]` instance embeddings.
    pub embeds: Var<'t>,
}

/// Pixel decoder outputs at full resolution.
#[derive(Clone, Copy)]
pub struct PixelMaps<'t> {
    /// `[ε, H * W]`
    pub embed: Var<'t>,
    /// `[1, H * W]`, strictly positive.
    pub depth: Var<'t>,
    /// `[2, H * W]`
    pub center: Option<Var<'t>>,
}

pub struct ModelOutput<'t> {
    /// Pyramid levels `F1..F4`, each `[C_i, H / 2^i, W / 2^i]`.
    pub pyramid: Vec<Var<'t>>,
    /// Context tokens `S_c`, `[H4 * W4, d]`.
    pub context: Var<'t>,
    /// Line tokens `S_l`, `[n, d]`; `None` when no lines were used.
    pub lines: Option<Var<'t>>,
    pub o_c: Var<'t>,
    /// `None` stands for an all-zero line branch output.
    pub o_l: Option<Var<'t>>,
    /// `S_p = O_c + O_l`, `[K, d]`.
    pub tokens: Var<'t>,
    pub main: Prediction<'t>,
    /// Heads applied to every layer of the context branch, then every layer
    /// of the line branch.
    pub aux: Vec<Prediction<'t>>,
    pub pixels: Option<PixelMaps<'t>>,
    /// Last-layer cross-attention nodes of each branch.
    pub context_attention: Var<'t>,
    pub line_attention: Option<Var<'t>>,
    /// `(w4, h4)`
    pub context_grid: (usize, usize),
}

/// Plain-value instance predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneInstanceSet {
    pub tokens: Tensor,
    pub probs: Vec<f64>,
    pub params: Vec<PlaneParam>,
    pub centers: Option<Vec<[f64; 2]>>,
    pub embeds: Vec<Vec<f64>>,
}

impl PlaneInstanceSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Indices of slots with plane probability above 0.5.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.probs[i] > 0.5).collect()
    }
}

/// Plain-value pixel predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelOutputs {
    pub width: usize,
    pub height: usize,
    /// `[ε, H * W]`
    pub embed: Tensor,
    pub depth: Vec<f64>,
    /// `[2, H * W]`
    pub center: Option<Tensor>,
}

impl PixelOutputs {
    /// Embedding of pixel `p` (row-major index).
    pub fn embedding_at(&self, p: usize) -> Vec<f64> {
        let n = self.width * self.height;
        (0..self.embed.rows()).map(|c| self.embed.data()[c * n + p]).collect()
    }
}

impl Prediction<'_> {
    pub fn to_instances(&self, tokens: &Tensor) -> PlaneInstanceSet {
        let probs = self.probs.value();
        let params = self.params.value();
        let embeds = self.embeds.value();
        let k = probs.rows();
        PlaneInstanceSet {
            tokens: tokens.clone(),
            probs: (0..k).map(|i| probs.at(i, PLANE_CLASS)).collect(),
            params: (0..k)
                .map(|i| PlaneParam([params.at(i, 0), params.at(i, 1), params.at(i, 2)]))
                .collect(),
            centers: self.centers.map(|c| {
                let c = c.value();
                (0..k).map(|i| [c.at(i, 0), c.at(i, 1)]).collect()
            }),
            embeds: (0..k).map(|i| embeds.row(i).to_vec()).collect(),
        }
    }
}

impl ModelOutput<'_> {
    pub fn instances(&self) -> PlaneInstanceSet {
        self.main.to_instances(&self.tokens.value())
    }

    pub fn pixel_outputs(&self, width: usize, height: usize) -> Option<PixelOutputs> {
        self.pixels.map(|p| PixelOutputs {
            width,
            height,
            embed: (*p.embed.value()).clone(),
            depth: p.depth.value().data().to_vec(),
            center: p.center.map(|c| (*c.value()).clone()),
        })
    }

    /// Head-averaged last-layer cross-attention `[K, H4 * W4]` over context
    /// tokens.
    pub fn context_attention_weights(&self) -> Tensor {
        let v = self.context_attention;
        v.tape().attention_weights(v).expect("attention node")
    }

    /// Head-averaged last-layer cross-attention `[K, n]` over line tokens.
    pub fn line_attention_weights(&self) -> Option<Tensor> {
        self.line_attention
            .map(|v| v.tape().attention_weights(v).expect("attention node"))
    }
}

/// Network configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl PlaneFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let d = c.width;
        let mut c_in = INPUT_CHANNELS;
        for (i, &ch) in c.backbone_channels.iter().enumerate() {
            init.conv(&format!("backbone.{i}.0"), c_in, ch, 3);
            init.conv(&format!("backbone.{i}.1"), ch, ch, 3);
            c_in = ch;
        }
        init.conv("context.proj", c.backbone_channels[3], d, 1);
        for l in 0..c.encoder_layers {
            encoder_layer_init(&mut init, &format!("encoder.{l}"), c);
        }
        if c.use_lines {
            init.conv("lines.reduce", c.backbone_channels[1], d, 1);
            init.mlp2("lines.mlp1", 2 * d, d, d);
            init.mlp2("lines.mlp2", d, d, d);
        }
        init.normal("queries", &[c.queries, d], 0.02);
        let branches: &[&str] = if c.use_lines { &["dec_c", "dec_l"] } else { &["dec_c"] };
        for branch in branches {
            for l in 0..c.decoder_layers {
                decoder_layer_init(&mut init, &format!("{branch}.{l}"), c);
            }
            init.layer_norm(&format!("{branch}.norm"), d);
        }
        init.linear("head.cls", d, 2);
        init.linear("head.param", d, 3);
        if c.use_center {
            init.linear("head.center", d, 2);
        }
        init.linear("head.embed", d, c.embed_dim);
        pixel_decoder_init(&mut init, "pix_embed", c, c.embed_dim, 0.0);
        // softplus(b) = INITIAL_DEPTH
        pixel_decoder_init(&mut init, "pix_depth", c, 1, INITIAL_DEPTH.exp_m1().ln());
        if c.use_center {
            pixel_decoder_init(&mut init, "pix_center", c, 2, 0.5);
        }
        Ok(Self { config, params: store })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn check_input(&self, input: &ModelInput<'_>) -> Result<(), ModelError> {
        let (w, h) = (input.width, input.height);
        if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
            return Err(ModelError::Input(format!("image size {w}x{h} is not divisible by 16")));
        }
        if input.image.len() != 3 * w * h {
            return Err(ModelError::Input(format!(
                "image has {} values, expected {}",
                input.image.len(),
                3 * w * h
            )));
        }
        if let Some((i, s)) = input.lines.iter().enumerate().find(|(_, s)| !s.is_valid_for(w, h)) {
            return Err(ModelError::Input(format!("line segment {i} {s:?} is degenerate or out of bounds")));
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        input: &ModelInput<'_>,
        opts: ForwardOptions,
    ) -> Result<ModelOutput<'t>, ModelError> {
        self.check_input(input)?;
        let c = &self.config;
        let ctx = Ctx {
            tape,
            store: &self.params,
            trainable: opts.trainable,
        };
        let (w, h) = (input.width, input.height);
        let d = c.width;

        // backbone
        let mut x = tape.constant(input_tensor(input.image, w, h));
        let mut pyramid = Vec::with_capacity(4);
        for i in 0..4 {
            x = ctx.conv(&format!("backbone.{i}.0"), x, 3, 2).relu();
            x = ctx.conv(&format!("backbone.{i}.1"), x, 3, 1).relu();
            pyramid.push(x);
        }

        // context encoder
        let (w4, h4) = (w / 16, h / 16);
        let mut context = ctx
            .conv("context.proj", pyramid[3], 1, 1)
            .reshape([d, w4 * h4])
            .transpose();
        let pos_c = tape.constant(sine_encoding(&grid_positions(w4, h4, 16), d, w, h));
        for l in 0..c.encoder_layers {
            context = encoder_layer(&ctx, &format!("encoder.{l}"), context, pos_c, c.heads);
        }

        // line tokens
        let line_input = c.use_lines && opts.use_lines && !input.lines.is_empty();
        let line_tokens = if line_input {
            let (w2, h2) = (w / 4, h / 4);
            let reduced = ctx.conv("lines.reduce", pyramid[1], 1, 1).reshape([d, w2 * h2]);
            let sample = |pts: Vec<[f64; 2]>| {
                let taps = pts
                    .iter()
                    .map(|p| bilinear_taps(p[0] / LINE_STRIDE as f64, p[1] / LINE_STRIDE as f64, w2, h2))
                    .collect();
                reduced.interp(Rc::new(taps), Axis::Cols).transpose()
            };
            let f1 = sample(input.lines.iter().map(|s| s.x1).collect());
            let f2 = sample(input.lines.iter().map(|s| s.x2).collect());
            let fl = ctx.mlp2("lines.mlp1", f1.concat_cols(f2));
            let tokens = ctx.mlp2("lines.mlp2", fl);
            let e1 = sine_encoding(&input.lines.iter().map(|s| s.x1).collect::<Vec<_>>(), d, w, h);
            let e2 = sine_encoding(&input.lines.iter().map(|s| s.x2).collect::<Vec<_>>(), d, w, h);
            let avg = e1.data().iter().zip(e2.data()).map(|(a, b)| 0.5 * (a + b)).collect();
            let pos = tape.constant(Tensor::new(e1.shape().to_vec(), avg));
            Some((tokens, pos))
        } else {
            None
        };

        // dual-branch decoder
        let queries = ctx.p("queries");
        let (inter_c, attn_c) = decoder(&ctx, "dec_c", context, pos_c, queries, c);
        let o_c = *inter_c.last().expect("at least one decoder layer");
        let (inter_l, attn_l, o_l) = match line_tokens {
            Some((tokens, pos)) => {
                let (inter, attn) = decoder(&ctx, "dec_l", tokens, pos, queries, c);
                let last = *inter.last().expect("at least one decoder layer");
                (inter, Some(attn), Some(last))
            }
            None => (Vec::new(), None, None),
        };
        let tokens = match o_l {
            Some(o_l) => o_c + o_l,
            None => o_c,
        };

        let main = heads(&ctx, tokens, c);
        let aux = if opts.aux {
            inter_c.iter().chain(&inter_l).map(|&s| heads(&ctx, s, c)).collect()
        } else {
            Vec::new()
        };

        let pixels = opts.pixels.then(|| PixelMaps {
            embed: pixel_decoder(&ctx, "pix_embed", &pyramid, w, h),
            depth: pixel_decoder(&ctx, "pix_depth", &pyramid, w, h).softplus(),
            center: c
                .use_center
                .then(|| pixel_decoder(&ctx, "pix_center", &pyramid, w, h)),
        });

        Ok(ModelOutput {
            pyramid,
            context,
            lines: line_tokens.map(|t| t.0),
            o_c,
            o_l,
            tokens,
            main,
            aux,
            pixels,
            context_attention: attn_c,
            line_attention: attn_l,
            context_grid: (w4, h4),
        })
    }

    /// Gradient-free forward pass returning plain values.
    pub fn predict(&self, input: &ModelInput<'_>, use_lines: bool) -> Result<Inference, ModelError> {
        let tape = Tape::new();
        let opts = ForwardOptions {
            use_lines,
            ..ForwardOptions::eval()
        };
        let out = self.forward(&tape, input, opts)?;
        Ok(Inference {
            instances: out.instances(),
            pixels: out.pixel_outputs(input.width, input.height).expect("pixel decoders ran"),
            context_attention: out.context_attention_weights(),
            line_attention: out.line_attention_weights(),
            context_grid: out.context_grid,
        })
    }

    /// Saves weights, the config and its fingerprint, plus any extra
    /// tensors (e.g. optimizer state) and metadata.
    pub fn save(
        &self,
        path: &Path,
        extra: BTreeMap<String, Tensor>,
        mut metadata: HashMap<String, String>,
    ) -> Result<(), CheckpointError> {
        let mut tensors = extra;
        for (name, t) in self.params.iter() {
            tensors.insert(format!("{MODEL_PREFIX}{name}"), t.clone());
        }
        metadata.insert("fingerprint".into(), self.fingerprint());
        metadata.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        save_tensors(path, &tensors, metadata)
    }

    /// Loads a checkpoint. When `expected` is given, its fingerprint must
    /// match the stored one. Returns the model plus the remaining tensors
    /// and metadata.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(Self, TensorsAndMeta), CheckpointError> {
        let p = path.display().to_string();
        let (tensors, metadata) = load_tensors(path)?;
        let format = |reason: String| CheckpointError::Format { path: p.clone(), reason };
        let config: ModelConfig = serde_json::from_str(
            metadata
                .get("model_config")
                .ok_or_else(|| format("no model_config metadata".into()))?,
        )
        .map_err(|e| format(e.to_string()))?;
        let found = metadata.get("fingerprint").cloned().unwrap_or_default();
        if found != config.fingerprint() {
            return Err(format("stored fingerprint does not match the stored config".into()));
        }
        if let Some(exp) = expected {
            if exp.fingerprint() != found {
                return Err(CheckpointError::Fingerprint {
                    path: p,
                    found,
                    expected: exp.fingerprint(),
                });
            }
        }
        let template = Self::new(config.clone(), 0).map_err(|e| format(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut rest = BTreeMap::new();
        for (name, t) in tensors {
            match name.strip_prefix(MODEL_PREFIX) {
                Some(n) => params.insert(n, t),
                None => {
                    rest.insert(name, t);
                }
            }
        }
        for name in template.params.names() {
            match params.get(name) {
                Some(t) if t.shape() == template.params.get(name).expect("listed").shape() => {}
                Some(t) => return Err(format(format!("parameter {name} has shape {:?}", t.shape()))),
                None => {
                    return Err(CheckpointError::Missing {
                        path: p,
                        name: name.to_string(),
                    })
                }
            }
        }
        if params.len() != template.params.len() {
            return Err(format("checkpoint has unexpected parameters".into()));
        }
        Ok((Self { config, params }, (rest, metadata)))
    }
}

const MODEL_PREFIX: &str = "model/";

pub type TensorsAndMeta = (BTreeMap<String, Tensor>, HashMap<String, String>);

/// Result of [`PlaneFormer::predict`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub instances: PlaneInstanceSet,
    pub pixels: PixelOutputs,
    /// `[K, H4 * W4]`
    pub context_attention: Tensor,
    /// `[K, n]`, absent when no line tokens were used.
    pub line_attention: Option<Tensor>,
    pub context_grid: (usize, usize),
}

/// Centered RGB followed by the pixel-center coordinates scaled to
/// `[-0.5, 0.5]`, `[INPUT_CHANNELS, h, w]`.
fn input_tensor(image_chw: &[f64], w: usize, h: usize) -> Tensor {
    let mut data: Vec<f64> = image_chw.iter().map(|v| v - 0.5).collect();
    data.reserve(2 * w * h);
    for _ in 0..h {
        data.extend((0..w).map(|x| (x as f64 + 0.5) / w as f64 - 0.5));
    }
    for y in 0..h {
        data.extend(std::iter::repeat_n((y as f64 + 0.5) / h as f64 - 0.5, w));
    }
    Tensor::new([INPUT_CHANNELS, h, w], data)
}

fn encoder_layer_init(init: &mut Init<'_>, name: &str, c: &ModelConfig) {
    init.attention(&format!("{name}.attn"), c.width);
    init.layer_norm(&format!("{name}.n1"), c.width);
    init.mlp2(&format!("{name}.ffn"), c.width, c.ffn_width, c.width);
    init.layer_norm(&format!("{name}.n2"), c.width);
}

fn encoder_layer<'t>(ctx: &Ctx<'t, '_>, name: &str, x: Var<'t>, pos: Var<'t>, heads: usize) -> Var<'t> {
    let qk = x + pos;
    let (a, _) = ctx.attention(&format!("{name}.attn"), qk, qk, x, heads);
    let x = ctx.layer_norm(&format!("{name}.n1"), x + a);
    let f = ctx.mlp2(&format!("{name}.ffn"), x);
    ctx.layer_norm(&format!("{name}.n2"), x + f)
}

fn decoder_layer_init(init: &mut Init<'_>, name: &str, c: &ModelConfig) {
    init.attention(&format!("{name}.self"), c.width);
    init.layer_norm(&format!("{name}.n1"), c.width);
    init.attention(&format!("{name}.cross"), c.width);
    init.layer_norm(&format!("{name}.n2"), c.width);
    init.mlp2(&format!("{name}.ffn"), c.width, c.ffn_width, c.width);
    init.layer_norm(&format!("{name}.n3"), c.width);
}

/// Runs one decoder branch; returns the normalized output of every layer
/// and the last layer's cross-attention node.
fn decoder<'t>(
    ctx: &Ctx<'t, '_>,
    name: &str,
    memory: Var<'t>,
    memory_pos: Var<'t>,
    queries: Var<'t>,
    c: &ModelConfig,
) -> (Vec<Var<'t>>, Var<'t>) {
    let mut tgt = ctx.tape.constant(Tensor::zeros([c.queries, c.width]));
    let keys = memory + memory_pos;
    let mut outputs = Vec::with_capacity(c.decoder_layers);
    let mut attention = None;
    for l in 0..c.decoder_layers {
        let n = format!("{name}.{l}");
        let q = tgt + queries;
        let (a, _) = ctx.attention(&format!("{n}.self"), q, q, tgt, c.heads);
        tgt = ctx.layer_norm(&format!("{n}.n1"), tgt + a);
        let (a, weights) = ctx.attention(&format!("{n}.cross"), tgt + queries, keys, memory, c.heads);
        attention = Some(weights);
        tgt = ctx.layer_norm(&format!("{n}.n2"), tgt + a);
        let f = ctx.mlp2(&format!("{n}.ffn"), tgt);
        tgt = ctx.layer_norm(&format!("{n}.n3"), tgt + f);
        outputs.push(ctx.layer_norm(&format!("{name}.norm"), tgt));
    }
    (outputs, attention.expect("at least one decoder layer"))
}

fn heads<'t>(ctx: &Ctx<'t, '_>, s: Var<'t>, c: &ModelConfig) -> Prediction<'t> {
    let logits = ctx.linear("head.cls", s);
    Prediction {
        logits,
        probs: logits.softmax_rows(),
        params: ctx.linear("head.param", s),
        centers: c.use_center.then(|| ctx.linear("head.center", s)),
        embeds: ctx.linear("head.embed", s),
    }
}

fn pixel_decoder_init(init: &mut Init<'_>, name: &str, c: &ModelConfig, out: usize, out_bias: f64) {
    let p = c.pixel_channels;
    for (i, &ch) in c.backbone_channels.iter().enumerate() {
        init.conv(&format!("{name}.lat{i}"), ch, p, 1);
    }
    init.conv(&format!("{name}.smooth"), p, p, 3);
    // plain fan-in scaling for the linear output layer
    init.normal(&format!("{name}.out.w"), &[out, p], (1.0 / p as f64).sqrt());
    init.constant(&format!("{name}.out.b"), &[out], out_bias);
}

/// Top-down decoder: laterals of every level summed coarse to fine, a 3x3
/// conv at half resolution, a 1x1 output layer, bilinear ×2 upsampling.
/// Returns `[out, H * W]`.
fn pixel_decoder<'t>(ctx: &Ctx<'t, '_>, name: &str, pyramid: &[Var<'t>], w: usize, h: usize) -> Var<'t> {
    let p = ctx.store.get(&format!("{name}.smooth.b")).expect("decoder exists").len();
    let mut top = ctx.conv(&format!("{name}.lat3"), pyramid[3], 1, 1);
    for i in (0..3).rev() {
        let (tw, th) = (w >> (i + 2), h >> (i + 2));
        let up = top
            .reshape([p, tw * th])
            .interp(upsample_taps(tw, th, 2), Axis::Cols)
            .reshape([p, 2 * th, 2 * tw]);
        top = ctx.conv(&format!("{name}.lat{i}"), pyramid[i], 1, 1) + up;
    }
    let smooth = ctx.conv(&format!("{name}.smooth"), top, 3, 1).relu();
    let out = ctx.conv(&format!("{name}.out"), smooth, 1, 1);
    let channels = out.shape()[0];
    out.reshape([channels, (w / 2) * (h / 2)])
        .interp(upsample_taps(w / 2, h / 2, 2), Axis::Cols)
}
