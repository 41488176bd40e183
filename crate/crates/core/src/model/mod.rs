//! The boundary-aware chord recognizer.
//!
//! Pipeline per piece: strided-conv patch embedding with GLU and sinusoidal
//! positions, a pre-LN transformer encoder producing `H`, a boundary MLP
//! producing one logit per token, FiLM conditioning of `LN(H)` on the
//! boundary probability (`Z = LN(H) * (1 + gamma) + beta`), a per-token
//! context window `[Z_t, H_{t-r..t+r}]`, and a single decoder block whose
//! three slot rows (root, quality, bass) self-attend, cross-attend to the
//! context window, and feed three classification heads.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ModelConfig, CLASS_COUNTS, FRAMES_PER_BEAT, PATCH_SIZE};

use crate::numerics::layers::{
    conv1d, dropout, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, RowRef, Tensor, Var};
use crate::score_io::{PianoRoll, NUM_KEYS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("config mismatch for {field}: expected {expected}, found {found}")]
    Mismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("token index {index} out of range for {len} tokens")]
    TokenOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Input(String),
}

/// Element slots of the decoder, in head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Root = 0,
    Quality = 1,
    Bass = 2,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Root, Slot::Quality, Slot::Bass];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Root => "root",
            Slot::Quality => "quality",
            Slot::Bass => "bass",
        }
    }

    pub fn from_index(i: usize) -> Option<Slot> {
        Self::ALL.get(i).copied()
    }
}

/// Decoder input for one slot of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotInput {
    Masked,
    Committed(usize),
}

/// Per-token decoder input: one entry per slot.
pub type DecoderTokens = [SlotInput; 3];

pub const ALL_MASKED: DecoderTokens = [SlotInput::Masked; 3];

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Mlp {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h);
        self.out.forward(g, h)
    }

    fn zero(&self, store: &mut ParamStore) {
        self.hidden.zero(store);
        self.out.zero(store);
    }
}

#[derive(Debug, Clone)]
struct Layers {
    patch_w: ParamId,
    patch_b: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    boundary: Mlp,
    film_norm: LayerNorm,
    film_gamma: Mlp,
    film_beta: Mlp,
    z_norm: LayerNorm,
    mask_embedding: ParamId,
    slot_embedding: ParamId,
    class_embeddings: [ParamId; 3],
    context_positions: ParamId,
    dec_ln_self: LayerNorm,
    dec_self: MultiHeadAttention,
    dec_ln_cross: LayerNorm,
    dec_cross: MultiHeadAttention,
    dec_ln_ffn: LayerNorm,
    dec_ffn: FeedForward,
    dec_norm: LayerNorm,
    heads: [Linear; 3],
}

/// FiLM outputs for a sequence.
#[derive(Debug, Clone, Copy)]
pub struct FilmOutput {
    pub gamma: Var,
    pub beta: Var,
    pub z: Var,
}

/// Everything computed once per piece before decoding.
#[derive(Debug, Clone, Copy)]
pub struct PieceEncoding {
    pub tokens: usize,
    pub h: Var,
    pub boundary_logits: Var,
    pub z: Var,
    /// `[tokens * context_rows, d_model]`.
    pub context: Var,
}

/// Per-token element logits: `[tokens, 13]`, `[tokens, 15]`, `[tokens, 13]`.
#[derive(Debug, Clone, Copy)]
pub struct ElementLogits {
    pub root: Var,
    pub quality: Var,
    pub bass: Var,
}

impl ElementLogits {
    pub fn slot(&self, slot: Slot) -> Var {
        match slot {
            Slot::Root => self.root,
            Slot::Quality => self.quality,
            Slot::Bass => self.bass,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub encoding: PieceEncoding,
    pub logits: ElementLogits,
}

/// Per-call switches that do not change the parameters.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout, drawing masks from this generator.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Ground-truth boundaries to feed FiLM instead of predicted probabilities.
    pub teacher_boundaries: Option<&'a [u8]>,
}

/// Network parameters plus their layout.
#[derive(Debug, Clone)]
pub struct ChordModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

fn drop_maybe(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var, NumericsError> {
    match rng {
        Some(r) => dropout(g, x, rate, *r),
        None => Ok(x),
    }
}

impl ChordModel {
    /// Builds a freshly initialized model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<ChordModel, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let d = config.d_model;
        let ffn = d * config.ffn_mult;
        let mut s = ParamStore::new();

        let patch_in = PATCH_SIZE * NUM_KEYS;
        let patch_bound = 1.0 / (patch_in as f64).sqrt();
        let patch_w = s.add_uniform("patch.w", &[patch_in, 2 * d], patch_bound, rng);
        let patch_b = s.add("patch.b", Tensor::zeros(&[2 * d]));

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let name = format!("encoder.{i}");
            encoder.push(EncoderBlock {
                ln_attn: LayerNorm::new(&mut s, &format!("{name}.ln_attn"), d),
                attn: MultiHeadAttention::new(&mut s, &format!("{name}.attn"), d, config.heads, rng)?,
                ln_ffn: LayerNorm::new(&mut s, &format!("{name}.ln_ffn"), d),
                ffn: FeedForward::new(&mut s, &format!("{name}.ffn"), d, ffn, rng),
            });
        }
        let encoder_norm = LayerNorm::new(&mut s, "encoder.norm", d);
        let boundary = Mlp::new(&mut s, "boundary", d, d, 1, rng);
        let film_norm = LayerNorm::new(&mut s, "film.norm", d + 1);
        let film_gamma = Mlp::new(&mut s, "film.gamma", d + 1, d, d, rng);
        let film_beta = Mlp::new(&mut s, "film.beta", d + 1, d, d, rng);
        let z_norm = LayerNorm::new(&mut s, "film.z_norm", d);

        let emb = 1.0 / (d as f64).sqrt();
        let mask_embedding = s.add_uniform("decoder.mask_embedding", &[1, d], emb, rng);
        let slot_embedding = s.add_uniform("decoder.slot_embedding", &[3, d], emb, rng);
        let class_embeddings = [
            s.add_uniform("decoder.class_embedding.root", &[CLASS_COUNTS[0], d], emb, rng),
            s.add_uniform("decoder.class_embedding.quality", &[CLASS_COUNTS[1], d], emb, rng),
            s.add_uniform("decoder.class_embedding.bass", &[CLASS_COUNTS[2], d], emb, rng),
        ];
        let context_positions =
            s.add_uniform("decoder.context_positions", &[config.context_rows(), d], emb, rng);
        let dec_ln_self = LayerNorm::new(&mut s, "decoder.ln_self", d);
        let dec_self = MultiHeadAttention::new(&mut s, "decoder.self_attn", d, config.heads, rng)?;
        let dec_ln_cross = LayerNorm::new(&mut s, "decoder.ln_cross", d);
        let dec_cross = MultiHeadAttention::new(&mut s, "decoder.cross_attn", d, config.heads, rng)?;
        let dec_ln_ffn = LayerNorm::new(&mut s, "decoder.ln_ffn", d);
        let dec_ffn = FeedForward::new(&mut s, "decoder.ffn", d, ffn, rng);
        let dec_norm = LayerNorm::new(&mut s, "decoder.norm", d);
        let heads = [
            Linear::new(&mut s, "head.root", d, CLASS_COUNTS[0], rng),
            Linear::new(&mut s, "head.quality", d, CLASS_COUNTS[1], rng),
            Linear::new(&mut s, "head.bass", d, CLASS_COUNTS[2], rng),
        ];

        Ok(ChordModel {
            config,
            params: s,
            layers: Layers {
                patch_w,
                patch_b,
                encoder,
                encoder_norm,
                boundary,
                film_norm,
                film_gamma,
                film_beta,
                z_norm,
                mask_embedding,
                slot_embedding,
                class_embeddings,
                context_positions,
                dec_ln_self,
                dec_self,
                dec_ln_cross,
                dec_cross,
                dec_ln_ffn,
                dec_ffn,
                dec_norm,
                heads,
            },
        })
    }

    /// Zeroes both FiLM MLPs so `gamma = beta = 0` and `Z = LN(H)`.
    pub fn zero_film(&mut self) {
        self.layers.film_gamma.zero(&mut self.params);
        self.layers.film_beta.zero(&mut self.params);
    }

    /// Class-embedding table for one slot, `[classes, d_model]`.
    pub fn class_embedding_param(&self, slot: Slot) -> ParamId {
        self.layers.class_embeddings[slot.index()]
    }

    /// Strided conv (kernel 6, 88 -> 2d), GLU to `d`, plus positions.
    pub fn patch_embed(&self, g: &mut Graph, roll: &PianoRoll) -> Result<Var, ModelError> {
        let frames = roll.num_frames();
        let x = g.constant(Tensor::new(vec![frames, NUM_KEYS], roll.to_values())?);
        self.patch_embed_values(g, x)
    }

    /// [`ChordModel::patch_embed`] over an arbitrary `[T, 88]` input.
    pub fn patch_embed_values(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let w = g.param(self.layers.patch_w);
        let b = g.param(self.layers.patch_b);
        let conv = conv1d(g, x, w, b, PATCH_SIZE)?;
        let gated = g.glu(conv)?;
        let tokens = g.shape(gated)[0];
        let pos = g.constant(sinusoidal_positions(tokens, self.config.d_model));
        Ok(g.add(gated, pos)?)
    }

    /// Pre-LN encoder blocks with full bidirectional attention, then a final
    /// LayerNorm. `tokens: [L, d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        tokens: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let p = self.config.dropout;
        let mut x = tokens;
        for block in &self.layers.encoder {
            let h = block.ln_attn.forward(g, x)?;
            let a = block.attn.forward(g, h, h, 1, None)?;
            let a = drop_maybe(g, a, p, &mut rng)?;
            x = g.add(x, a)?;
            let h = block.ln_ffn.forward(g, x)?;
            let f = block.ffn.forward(g, h)?;
            let f = drop_maybe(g, f, p, &mut rng)?;
            x = g.add(x, f)?;
        }
        Ok(self.layers.encoder_norm.forward(g, x)?)
    }

    /// Two-layer MLP, one boundary logit per token: `[L, 1]`.
    pub fn predict_boundaries(&self, g: &mut Graph, h: Var) -> Result<Var, ModelError> {
        Ok(self.layers.boundary.forward(g, h)?)
    }

    /// FiLM: `[gamma, beta] = MLPs(LN([H_t; e_t]))`, `Z = LN(H) * (1 + gamma) + beta`.
    /// `boundary_feature` is `[L, 1]`.
    pub fn film_condition(&self, g: &mut Graph, h: Var, boundary_feature: Var) -> Result<FilmOutput, ModelError> {
        let joined = g.concat_cols(h, boundary_feature)?;
        let normed = self.layers.film_norm.forward(g, joined)?;
        let gamma = self.layers.film_gamma.forward(g, normed)?;
        let beta = self.layers.film_beta.forward(g, normed)?;
        let ln_h = self.layers.z_norm.forward(g, h)?;
        let scale = g.add_scalar(gamma, 1.0);
        let scaled = g.mul(ln_h, scale)?;
        let z = g.add(scaled, beta)?;
        Ok(FilmOutput { gamma, beta, z })
    }

    /// `LN(H)` through the same normalization FiLM uses; the unconditioned `Z`.
    pub fn unconditioned(&self, g: &mut Graph, h: Var) -> Result<Var, ModelError> {
        Ok(self.layers.z_norm.forward(g, h)?)
    }

    fn context_rows_for(&self, t: usize, len: usize) -> Vec<RowRef> {
        let r = self.config.context_radius as isize;
        let mut rows = Vec::with_capacity(self.config.context_rows());
        rows.push(Some((0, t)));
        for off in -r..=r {
            let n = t as isize + off;
            rows.push((0..len as isize).contains(&n).then_some((1, n as usize)));
        }
        rows
    }

    /// Context windows for all tokens stacked: `[L * (2r + 2), d]`, each
    /// window `[Z_t, H_{t-r}, ..., H_{t+r}]` with zero rows past the edges.
    pub fn assemble_context(&self, g: &mut Graph, z: Var, h: Var) -> Result<Var, ModelError> {
        let len = g.shape(h)[0];
        let rows = (0..len).flat_map(|t| self.context_rows_for(t, len)).collect();
        Ok(g.gather_rows(&[z, h], rows)?)
    }

    /// The context window of a single token, `[2r + 2, d]`.
    pub fn context_window(&self, g: &mut Graph, z: Var, h: Var, t: usize) -> Result<Var, ModelError> {
        let len = g.shape(h)[0];
        if t >= len {
            return Err(ModelError::TokenOutOfRange { index: t, len });
        }
        Ok(g.gather_rows(&[z, h], self.context_rows_for(t, len))?)
    }

    /// Decoder input rows `[L * 3, d]`: slot embedding plus either the shared
    /// mask embedding or the committed class embedding.
    pub fn decoder_inputs(&self, g: &mut Graph, slots: &[DecoderTokens]) -> Result<Var, ModelError> {
        let mask = g.param(self.layers.mask_embedding);
        let tables: Vec<Var> = self
            .layers
            .class_embeddings
            .iter()
            .map(|p| g.param(*p))
            .collect();
        let slot_table = g.param(self.layers.slot_embedding);
        let mut content = Vec::with_capacity(slots.len() * 3);
        let mut slot_rows = Vec::with_capacity(slots.len() * 3);
        for token in slots {
            for (s, input) in token.iter().enumerate() {
                content.push(match *input {
                    SlotInput::Masked => Some((0, 0)),
                    SlotInput::Committed(class) => {
                        if class >= CLASS_COUNTS[s] {
                            return Err(ModelError::Input(format!(
                                "class {class} out of range for {} slot",
                                Slot::ALL[s].name()
                            )));
                        }
                        Some((1 + s, class))
                    }
                });
                slot_rows.push(Some((0, s)));
            }
        }
        let mut sources = vec![mask];
        sources.extend(tables);
        let content = g.gather_rows(&sources, content)?;
        let slot = g.gather_rows(&[slot_table], slot_rows)?;
        Ok(g.add(content, slot)?)
    }

    /// One decoder block over all tokens at once: self-attention among each
    /// token's three slot rows, cross-attention into that token's context
    /// window, feed-forward, then one head per slot row.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        x_in: Var,
        context: Var,
        tokens: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ElementLogits, ModelError> {
        let l = &self.layers;
        let p = self.config.dropout;
        let rows = self.config.context_rows();
        if g.shape(x_in)[0] != tokens * 3 || g.shape(context)[0] != tokens * rows {
            return Err(ModelError::Input(format!(
                "decoder got {} slot rows and {} context rows for {tokens} tokens",
                g.shape(x_in)[0],
                g.shape(context)[0]
            )));
        }
        let mut x = x_in;
        let h = l.dec_ln_self.forward(g, x)?;
        let a = l.dec_self.forward(g, h, h, tokens, None)?;
        let a = drop_maybe(g, a, p, &mut rng)?;
        x = g.add(x, a)?;

        let pos_table = g.param(l.context_positions);
        let pos = g.gather_rows(&[pos_table], (0..tokens * rows).map(|i| Some((0, i % rows))).collect())?;
        let kv = g.add(context, pos)?;
        let h = l.dec_ln_cross.forward(g, x)?;
        let a = l.dec_cross.forward(g, h, kv, tokens, None)?;
        let a = drop_maybe(g, a, p, &mut rng)?;
        x = g.add(x, a)?;

        let h = l.dec_ln_ffn.forward(g, x)?;
        let f = l.dec_ffn.forward(g, h)?;
        let f = drop_maybe(g, f, p, &mut rng)?;
        x = g.add(x, f)?;
        let x = l.dec_norm.forward(g, x)?;

        let mut out = [x; 3];
        for (s, head) in l.heads.iter().enumerate() {
            let picked = g.gather_rows(&[x], (0..tokens).map(|t| Some((0, t * 3 + s))).collect())?;
            out[s] = head.forward(g, picked)?;
        }
        Ok(ElementLogits {
            root: out[0],
            quality: out[1],
            bass: out[2],
        })
    }

    /// Patch embedding through context assembly for one piece.
    pub fn encode_piece(
        &self,
        g: &mut Graph,
        roll: &PianoRoll,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<PieceEncoding, ModelError> {
        let tokens_in = self.patch_embed(g, roll)?;
        let tokens = g.shape(tokens_in)[0];
        if tokens == 0 {
            return Err(ModelError::Input(format!("piece {} has no tokens", roll.piece_id())));
        }
        let h = self.encode(g, tokens_in, opts.dropout_rng.as_deref_mut())?;
        let boundary_logits = self.predict_boundaries(g, h)?;
        let z = if self.config.use_boundary {
            let feature = match opts.teacher_boundaries {
                Some(b) => {
                    if b.len() != tokens {
                        return Err(ModelError::Input(format!(
                            "{} teacher boundaries for {tokens} tokens",
                            b.len()
                        )));
                    }
                    g.constant(Tensor::new(vec![tokens, 1], b.iter().map(|&v| f64::from(v)).collect())?)
                }
                None => g.sigmoid(boundary_logits),
            };
            self.film_condition(g, h, feature)?.z
        } else {
            self.unconditioned(g, h)?
        };
        let context = self.assemble_context(g, z, h)?;
        Ok(PieceEncoding {
            tokens,
            h,
            boundary_logits,
            z,
            context,
        })
    }

    /// End-to-end forward pass with the given per-token slot inputs.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        roll: &PianoRoll,
        slots: &[DecoderTokens],
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput, ModelError> {
        let encoding = self.encode_piece(g, roll, &mut opts)?;
        if slots.len() != encoding.tokens {
            return Err(ModelError::Input(format!(
                "{} slot inputs for {} tokens",
                slots.len(),
                encoding.tokens
            )));
        }
        let x = self.decoder_inputs(g, slots)?;
        let logits = self.decode_step(g, x, encoding.context, encoding.tokens, opts.dropout_rng)?;
        Ok(ForwardOutput { encoding, logits })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
