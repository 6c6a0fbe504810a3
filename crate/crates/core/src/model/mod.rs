//! The vector-field network: a ConvNeXt V2 text branch, input assembly with a
//! convolutional position embedding, adaLN-zero DiT blocks with rotary
//! attention, and a projection back to the feature dimension.

pub mod layers;
pub mod params;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::text::ExtendedSequence;
pub use layers::{
    attention_logits, sinusoidal_positions, step_features, Attention, ConvNeXtBlock, ConvPositionEmbedding,
    DitBlock, FeedForward, FinalLayer, Linear, StepEmbedding,
};
pub use params::{Binder, Bound, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("stream lengths differ: noisy {noisy}, masked speech {cond}, text {text}")]
    LengthMismatch { noisy: usize, cond: usize, text: usize },
    #[error("{stream} has {got} channels, expected {expected}")]
    ChannelMismatch {
        stream: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("sequence of {len} frames exceeds capacity {capacity}")]
    TooLong { len: usize, capacity: usize },
    #[error("token id {id} is outside a vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty sequence")]
    Empty,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub capacity: usize,
    pub dit_layers: usize,
    pub dit_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub convnext_layers: usize,
    pub convnext_dim: usize,
    pub convnext_ffn_mult: usize,
    pub convnext_kernel: usize,
    pub conv_pos_kernel: usize,
    /// Token count including the filler at ID 0.
    pub vocab_size: usize,
    pub rope_base: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 8,
            capacity: 256,
            dit_layers: 2,
            dit_dim: 64,
            heads: 4,
            ffn_mult: 2,
            convnext_layers: 2,
            convnext_dim: 32,
            convnext_ffn_mult: 2,
            convnext_kernel: 7,
            conv_pos_kernel: 31,
            vocab_size: 17,
            rope_base: 10000.0,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feat_dim", self.feat_dim),
            ("capacity", self.capacity),
            ("dit_layers", self.dit_layers),
            ("dit_dim", self.dit_dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("convnext_layers", self.convnext_layers),
            ("convnext_dim", self.convnext_dim),
            ("convnext_ffn_mult", self.convnext_ffn_mult),
            ("convnext_kernel", self.convnext_kernel),
            ("conv_pos_kernel", self.conv_pos_kernel),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.dit_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dit_dim {} is not divisible by heads {}",
                self.dit_dim, self.heads
            )));
        }
        if (self.dit_dim / self.heads) % 2 != 0 {
            return Err(ModelError::Config("head dimension must be even for rotary attention".into()));
        }
        if self.dit_dim % 2 != 0 || self.convnext_dim % 2 != 0 {
            return Err(ModelError::Config("embedding widths must be even".into()));
        }
        for (name, k) in [
            ("convnext_kernel", self.convnext_kernel),
            ("conv_pos_kernel", self.conv_pos_kernel),
        ] {
            if k % 2 == 0 {
                return Err(ModelError::Config(format!("{name} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(ModelError::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Which conditions survive into a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondDrop {
    Keep,
    DropAudio,
    DropAudioAndText,
}

/// Zeroes the masked speech for either drop mode and replaces the text with
/// filler when text is dropped too.
pub fn drop_conditions<T: Real>(
    masked_speech: &Tensor<T>,
    z: &ExtendedSequence,
    mode: CondDrop,
) -> (Tensor<T>, ExtendedSequence) {
    match mode {
        CondDrop::Keep => (masked_speech.clone(), z.clone()),
        CondDrop::DropAudio => (Tensor::zeros(masked_speech.shape().to_vec()), z.clone()),
        CondDrop::DropAudioAndText => (
            Tensor::zeros(masked_speech.shape().to_vec()),
            ExtendedSequence::all_filler(z.len()),
        ),
    }
}

#[derive(Clone, Debug)]
struct Layout {
    text_embed: ParamId,
    text_blocks: Vec<ConvNeXtBlock>,
    input_proj: Linear,
    conv_pos: ConvPositionEmbedding,
    time: StepEmbedding,
    blocks: Vec<DitBlock>,
    final_layer: FinalLayer,
}

#[derive(Clone, Debug)]
pub struct VectorFieldModel<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> VectorFieldModel<T> {
    /// Registers parameters in a fixed order so that names and shapes depend
    /// only on the config.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::default();
        let text_embed = store.add(
            "text.embed.weight",
            crate::cfm::sample_noise(&[c.vocab_size, c.convnext_dim], rng),
        );
        let text_blocks = (0..c.convnext_layers)
            .map(|i| {
                ConvNeXtBlock::new(
                    &mut store,
                    &format!("text.blocks.{i}"),
                    c.convnext_dim,
                    c.convnext_dim * c.convnext_ffn_mult,
                    c.convnext_kernel,
                    rng,
                )
            })
            .collect();
        let input_proj = Linear::new(
            &mut store,
            "input.proj",
            2 * c.feat_dim + c.convnext_dim,
            c.dit_dim,
            rng,
        );
        let conv_pos = ConvPositionEmbedding::new(&mut store, "input.conv_pos", c.dit_dim, c.conv_pos_kernel, rng);
        let time = StepEmbedding::new(&mut store, "time", c.dit_dim, rng);
        let blocks = (0..c.dit_layers)
            .map(|i| {
                DitBlock::new(
                    &mut store,
                    &format!("blocks.{i}"),
                    c.dit_dim,
                    c.heads,
                    c.dit_dim * c.ffn_mult,
                    rng,
                )
            })
            .collect();
        let final_layer = FinalLayer::new(&mut store, "final", c.dit_dim, c.feat_dim);
        Ok(VectorFieldModel {
            config,
            params: store,
            layout: Layout {
                text_embed,
                text_blocks,
                input_proj,
                conv_pos,
                time,
                blocks,
                final_layer,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with another congruent parameter set (e.g. EMA weights).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.congruent(&params) {
            return Err(ModelError::Config("parameter set does not match the model layout".into()));
        }
        Ok(VectorFieldModel {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
        })
    }

    pub fn dit_blocks(&self) -> &[DitBlock] {
        &self.layout.blocks
    }

    pub fn text_blocks(&self) -> &[ConvNeXtBlock] {
        &self.layout.text_blocks
    }

    pub fn conv_position(&self) -> &ConvPositionEmbedding {
        &self.layout.conv_pos
    }

    pub fn step_embedding(&self) -> &StepEmbedding {
        &self.layout.time
    }

    /// Flow-step embedding `[1, dit_dim]`, before the SiLU that feeds adaLN.
    pub fn embed_flow_step(&self, b: &Binder<T>, t: f64) -> Result<Var> {
        Ok(self.layout.time.forward(b, t)?)
    }

    /// Token embedding plus fixed sinusoidal positions through the ConvNeXt
    /// stack, giving `[len, convnext_dim]`.
    pub fn refine_text(&self, b: &Binder<T>, z: &ExtendedSequence) -> Result<Var> {
        let c = &self.config;
        if let Some(&id) = z.ids().iter().find(|&&id| id >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: c.vocab_size,
            });
        }
        let g = b.graph();
        let emb = g.embedding(b.get(self.layout.text_embed), z.ids())?;
        let pos = g.constant(sinusoidal_positions(z.len(), c.convnext_dim));
        let mut h = g.add(emb, pos)?;
        for block in &self.layout.text_blocks {
            h = block.forward(b, h)?;
        }
        Ok(h)
    }

    /// Concatenated streams through the input projection and convolutional
    /// position embedding: the residual stream entering the DiT stack.
    pub fn embed_inputs(&self, b: &Binder<T>, noisy: Var, cond: Var, z: &ExtendedSequence) -> Result<Var> {
        let g = b.graph();
        let (ns, cs) = (g.shape(noisy), g.shape(cond));
        let f = self.config.feat_dim;
        if ns.len() != 2 || ns[1] != f {
            return Err(ModelError::ChannelMismatch {
                stream: "noisy",
                got: ns.last().copied().unwrap_or(0),
                expected: f,
            });
        }
        if cs.len() != 2 || cs[1] != f {
            return Err(ModelError::ChannelMismatch {
                stream: "masked speech",
                got: cs.last().copied().unwrap_or(0),
                expected: f,
            });
        }
        if ns[0] != cs[0] || ns[0] != z.len() {
            return Err(ModelError::LengthMismatch {
                noisy: ns[0],
                cond: cs[0],
                text: z.len(),
            });
        }
        if ns[0] == 0 {
            return Err(ModelError::Empty);
        }
        if ns[0] > self.config.capacity {
            return Err(ModelError::TooLong {
                len: ns[0],
                capacity: self.config.capacity,
            });
        }
        let text = self.refine_text(b, z)?;
        let x = g.concat(&[noisy, cond, text], 1)?;
        let x = self.layout.input_proj.forward(b, x)?;
        Ok(self.layout.conv_pos.forward(b, x)?)
    }

    /// Runs the DiT stack on `x`; returns the residual stream before the
    /// final layer.
    pub fn dit_stack(&self, b: &Binder<T>, x: Var, t: f64, mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let g = b.graph();
        let temb = self.embed_flow_step(b, t)?;
        let cond = g.silu(temb)?;
        let mut h = x;
        for block in &self.layout.blocks {
            h = block.forward(b, h, cond, self.config.rope_base, self.config.dropout, layers::reborrow(&mut rng))?;
        }
        Ok(h)
    }

    /// Predicted velocity `[len, feat_dim]`. Dropout is active only when an
    /// rng is supplied.
    pub fn forward(
        &self,
        b: &Binder<T>,
        noisy: Var,
        cond: Var,
        z: &ExtendedSequence,
        t: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let g = b.graph();
        let x = self.embed_inputs(b, noisy, cond, z)?;
        let h = self.dit_stack(b, x, t, rng)?;
        let temb = self.embed_flow_step(b, t)?;
        let c = g.silu(temb)?;
        Ok(self.layout.final_layer.forward(b, h, c)?)
    }

    /// Inference forward pass without gradient tracking.
    pub fn predict(&self, noisy: &Tensor<T>, cond: &Tensor<T>, z: &ExtendedSequence, t: f64) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.params, false);
        let n = g.constant(noisy.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&b, n, c, z, t, None)?;
        Ok(g.value(out))
    }
}
